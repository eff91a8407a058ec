"""Config files: TOML in, validated objects out, resolved snapshot back.

Layout: [nominal] holds the design-model parameters, [patient.<name>]
rows add true plants, [mpc]/[ekf] tune the controller and observer, and
[scenario] wires a run (which plant, which controller, duration, noise,
seed, sweep band/resolution). Every field is optional except the
[nominal] parameter set; omitted fields take the module defaults, and the
resolved snapshot written next to each run spells all of them out, so
feeding the snapshot back reproduces the run.

Dotted overrides (`--set section.key=value`) edit the raw data before
validation. `patient.<field>` targets the active plant; the plant is then
stored in the snapshot as [patient.active] so the override survives the
round trip. `patient.<name>.<field>` targets a named row.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .controllers import MpcConfig
from .patient_model import PatientParams, infusion_for_bis
from .scenario import CONTROLLER_KINDS, EkfTuning, Scenario

PATIENT_KEYS = tuple(f.name for f in fields(PatientParams))
MPC_KEYS = tuple(f.name for f in fields(MpcConfig))
EKF_KEYS = tuple(f.name for f in fields(EkfTuning))
SCENARIO_KEYS = ("plant", "controller", "ts", "duration", "noise_sd", "seed",
                 "band", "resolution")

_SCENARIO_DEFAULTS = {
    "plant": "nominal",
    "controller": "state_space_ekf",
    "ts": 1.0,
    "duration": 1800.0,
    "noise_sd": 0.0,
    "seed": 0,
    "band": 10.0,
    "resolution": 1.0,
}


@dataclass
class ResolvedConfig:
    """Everything a command needs, fully validated and defaulted."""

    nominal: PatientParams
    plant: PatientParams
    plant_name: str
    roster: dict            # name -> PatientParams, includes "nominal"
    mpc: MpcConfig
    ekf: EkfTuning
    controller_kind: str
    ts: float
    duration: float
    noise_sd: float
    seed: int
    band: float
    resolution: float
    source_path: str = ""
    source_sha256: str = ""

    def scenario(self, patient=None, controller_kind=None) -> Scenario:
        return Scenario(
            patient=self.plant if patient is None else patient,
            nominal=self.nominal,
            controller_kind=controller_kind or self.controller_kind,
            mpc=self.mpc,
            ekf=self.ekf,
            ts=self.ts,
            duration=self.duration,
            noise_sd=self.noise_sd,
            seed=self.seed,
        )


def _check_keys(section: str, data: dict, allowed) -> None:
    for key in data:
        if key not in allowed:
            raise ValueError(f"config [{section}]: unknown key {key!r}")


def _patient_from(section: str, data: dict) -> PatientParams:
    _check_keys(section, data, PATIENT_KEYS)
    missing = [k for k in PATIENT_KEYS if k != "weight" and k not in data]
    if missing:
        raise ValueError(f"config [{section}]: missing keys {missing}")
    try:
        return PatientParams(**data)
    except (ValueError, TypeError) as exc:
        raise ValueError(f"config [{section}]: {exc}") from None


def parse_override(text: str):
    """Split 'dotted.key=value' into (path tuple, typed value)."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ValueError(f"override {text!r}: expected dotted.key=value")
    path = tuple(key.strip().split("."))
    if any(not part for part in path) or len(path) < 2:
        raise ValueError(f"override {text!r}: expected dotted.key=value")
    raw = raw.strip()
    if raw.lower() in ("true", "false"):
        value = raw.lower() == "true"
    else:
        try:
            value = int(raw)
        except ValueError:
            try:
                value = float(raw)
            except ValueError:
                value = raw
    return path, value


def load_raw(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def resolve(
    raw: dict,
    overrides=(),
    controller=None,
    seed=None,
    source_path: str = "",
    source_bytes: bytes = b"",
    allow_plant_override: bool = True,
) -> ResolvedConfig:
    """Validate a raw config dict into a ResolvedConfig.

    `controller` and `seed` mirror the CLI flags and win over the file.
    allow_plant_override=False rejects two-part `patient.<field>` keys for
    commands that run the whole roster and have no single active plant.
    """
    known = ("nominal", "patient", "mpc", "ekf", "scenario")
    _check_keys("top level", raw, known)
    if "nominal" not in raw:
        raise ValueError("config: missing [nominal] section")

    nominal_raw = dict(raw["nominal"])
    patient_tables = {}
    for name, row in raw.get("patient", {}).items():
        if not isinstance(row, dict):
            raise ValueError(f"config [patient]: {name!r} must be a table "
                             "([patient.<name>] section)")
        patient_tables[name] = dict(row)
    mpc_raw = dict(raw.get("mpc", {}))
    ekf_raw = dict(raw.get("ekf", {}))
    scen_raw = {**_SCENARIO_DEFAULTS, **raw.get("scenario", {})}
    _check_keys("scenario", scen_raw, SCENARIO_KEYS)

    plant_extra = {}
    for text in overrides:
        path, value = parse_override(text) if isinstance(text, str) else text
        section = path[0]
        if section == "patient" and len(path) == 3:
            name, key = path[1], path[2]
            if name not in patient_tables:
                raise ValueError(f"override: no [patient.{name}] section")
            patient_tables[name][key] = value
        elif section == "patient" and len(path) == 2:
            if not allow_plant_override:
                raise ValueError(
                    f"override {'.'.join(path)}: this command runs every "
                    "patient; use patient.<name>.<field>")
            plant_extra[path[1]] = value
        elif section in ("nominal", "mpc", "ekf", "scenario") and len(path) == 2:
            {"nominal": nominal_raw, "mpc": mpc_raw, "ekf": ekf_raw,
             "scenario": scen_raw}[section][path[1]] = value
        else:
            raise ValueError(f"override {'.'.join(path)}: unknown target")

    nominal = _patient_from("nominal", nominal_raw)
    roster = {"nominal": nominal}
    for name, row in patient_tables.items():
        roster[name] = _patient_from(f"patient.{name}", row)

    plant_name = str(scen_raw["plant"])
    if plant_name not in roster:
        raise ValueError(f"config [scenario]: plant {plant_name!r} is not "
                         "[nominal] or any [patient.<name>] section")
    plant = roster[plant_name]
    if plant_extra:
        plant_raw = {f.name: getattr(plant, f.name) for f in fields(PatientParams)}
        plant_raw.update(plant_extra)
        plant = _patient_from("patient", plant_raw)
        plant_name = "active"
        roster["active"] = plant

    _check_keys("mpc", mpc_raw, MPC_KEYS)
    try:
        mpc = MpcConfig(**mpc_raw)
    except (ValueError, TypeError) as exc:
        raise ValueError(f"config [mpc]: {exc}") from None
    _check_keys("ekf", ekf_raw, EKF_KEYS)
    try:
        ekf = EkfTuning(**ekf_raw)
    except (ValueError, TypeError) as exc:
        raise ValueError(f"config [ekf]: {exc}") from None

    kind = (controller or str(scen_raw["controller"])).replace("-", "_")
    if kind not in CONTROLLER_KINDS:
        raise ValueError(f"config: controller must be one of {CONTROLLER_KINDS}, "
                         f"got {kind!r}")
    if seed is not None:
        scen_raw["seed"] = int(seed)

    # Setpoint reachability on the design model: the steady infusion that
    # holds BIS at the setpoint must lie strictly inside the input bounds.
    u_ss = infusion_for_bis(nominal, mpc.setpoint)
    if not mpc.u_min < u_ss < mpc.u_max:
        raise ValueError(
            f"config: setpoint {mpc.setpoint} needs steady infusion "
            f"{u_ss:.1f} ug/kg/min, outside ({mpc.u_min}, {mpc.u_max})")

    rc = ResolvedConfig(
        nominal=nominal, plant=plant, plant_name=plant_name, roster=roster,
        mpc=mpc, ekf=ekf, controller_kind=kind,
        ts=float(scen_raw["ts"]), duration=float(scen_raw["duration"]),
        noise_sd=float(scen_raw["noise_sd"]), seed=int(scen_raw["seed"]),
        band=float(scen_raw["band"]), resolution=float(scen_raw["resolution"]),
        source_path=source_path,
        source_sha256=hashlib.sha256(source_bytes).hexdigest() if source_bytes else "",
    )
    rc.scenario()  # run the Scenario invariants once, so errors surface at load
    if rc.resolution < rc.ts:
        raise ValueError("config [scenario]: resolution must be >= ts")
    return rc


def load(path, overrides=(), controller=None, seed=None,
         allow_plant_override: bool = True) -> ResolvedConfig:
    with open(path, "rb") as fh:
        data = fh.read()
    return resolve(
        tomllib.loads(data.decode()), overrides, controller, seed,
        source_path=str(path), source_bytes=data,
        allow_plant_override=allow_plant_override,
    )


def _toml_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int,)):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    try:  # sequences (mpc weight vectors)
        return "[" + ", ".join(_toml_scalar(float(v)) for v in value) + "]"
    except TypeError:
        raise ValueError(f"cannot serialize {value!r} to TOML") from None


def _section(title: str, data: dict) -> str:
    lines = [f"[{title}]"]
    lines += [f"{k} = {_toml_scalar(v)}" for k, v in data.items()]
    return "\n".join(lines) + "\n"


def resolved_toml(rc: ResolvedConfig) -> str:
    """Snapshot with every default expanded; loading it reproduces the run."""
    def patient_dict(p: PatientParams) -> dict:
        return {f.name: getattr(p, f.name) for f in fields(PatientParams)}

    mpc = rc.mpc
    parts = [_section("nominal", patient_dict(rc.nominal))]
    for name, row in rc.roster.items():
        if name != "nominal":
            parts.append(_section(f"patient.{name}", patient_dict(row)))
    parts.append(_section("mpc", {
        "n1": mpc.n1, "n2": mpc.n2, "nu": mpc.nu,
        "delta": [float(v) for v in mpc.delta],
        "alpha": [float(v) for v in mpc.alpha],
        "setpoint": mpc.setpoint, "u_min": mpc.u_min, "u_max": mpc.u_max,
        "du_max": mpc.du_max,
    }))
    parts.append(_section("ekf", {
        "p0": rc.ekf.p0, "q": rc.ekf.q, "r": rc.ekf.r, "mode": rc.ekf.mode,
    }))
    parts.append(_section("scenario", {
        "plant": rc.plant_name, "controller": rc.controller_kind,
        "ts": rc.ts, "duration": rc.duration, "noise_sd": rc.noise_sd,
        "seed": rc.seed, "band": rc.band, "resolution": rc.resolution,
    }))
    return "\n".join(parts)
