"""Closed-loop experiments: wiring, traces, metrics, delay tolerance.

A Scenario pairs a true plant (possibly mismatched in parameters and
measurement delay) with a controller designed on the nominal model, runs
the loop, and records everything. Metrics are pure functions of the trace,
so anything reported here can be recomputed offline from the CSV. The
delay-tolerance search bisects the true patient delay while the controller
keeps believing the nominal one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .controllers import BaselineMpc, MpcConfig, StateSpaceMpc
from .estimator import LINEARIZATION_MODES, ExtendedKalmanFilter
from .patient_model import (
    PatientParams,
    bis_of,
    discretize,
    initial_state,
    measure,
    step,
)

CONTROLLER_KINDS = ("state_space_ekf", "baseline")

CSV_COLUMNS = (
    "t_s", "u_ugkgmin", "x1", "x2", "x3", "xe",
    "x1_hat", "x2_hat", "x3_hat", "xe_hat",
    "bis_true", "bis_meas", "setpoint",
)


@dataclass
class EkfTuning:
    """Scalar observer knobs as they appear in a config file."""

    p0: float = 10.0
    q: float = 1e-6
    r: float = 1.0
    mode: str = "at_estimate"

    def __post_init__(self):
        if not self.p0 > 0.0:
            raise ValueError(f"ekf: p0 must be > 0, got {self.p0}")
        if self.q < 0.0:
            raise ValueError(f"ekf: q must be >= 0, got {self.q}")
        if not self.r > 0.0:
            raise ValueError(f"ekf: r must be > 0, got {self.r}")
        if self.mode not in LINEARIZATION_MODES:
            raise ValueError(f"ekf: unknown mode {self.mode!r}")


@dataclass
class Scenario:
    """One closed-loop experiment, fully determined (including the seed)."""

    patient: PatientParams
    nominal: PatientParams
    controller_kind: str = "state_space_ekf"
    mpc: MpcConfig = field(default_factory=MpcConfig)
    ekf: EkfTuning = field(default_factory=EkfTuning)
    ts: float = 1.0
    duration: float = 1800.0
    noise_sd: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.controller_kind not in CONTROLLER_KINDS:
            raise ValueError(f"scenario: unknown controller {self.controller_kind!r}")
        if not self.ts > 0.0:
            raise ValueError(f"scenario: ts must be > 0, got {self.ts}")
        if self.duration < 10.0 * self.patient.td:
            raise ValueError(
                f"scenario: duration {self.duration} s < 10 x patient delay "
                f"({10.0 * self.patient.td} s)"
            )
        n = self.duration / self.ts
        if abs(n - round(n)) > 1e-9 or round(n) < 1:
            raise ValueError(f"scenario: ts {self.ts} must divide duration {self.duration}")
        if self.noise_sd < 0.0:
            raise ValueError(f"scenario: noise_sd must be >= 0, got {self.noise_sd}")

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.ts))


@dataclass
class SimTrace:
    """Per-step record of one run; the estimate columns are NaN when the
    controller carries no observer. `failures` lists the steps on which the
    controller fell back to holding its input (kept out of the CSV)."""

    t: np.ndarray
    u: np.ndarray
    x: np.ndarray          # (n, 4) true state
    x_hat: np.ndarray      # (n, 4) estimate or NaN
    bis_true: np.ndarray
    bis_meas: np.ndarray
    setpoint: np.ndarray
    failures: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        n = self.t.size
        if not (self.u.size == self.bis_true.size == self.bis_meas.size
                == self.setpoint.size == n and self.x.shape == (n, 4)
                and self.x_hat.shape == (n, 4)):
            raise ValueError("trace: column lengths disagree")

    @property
    def n_steps(self) -> int:
        return self.t.size

    @property
    def ts(self) -> float:
        return float(self.t[1] - self.t[0]) if self.t.size > 1 else 1.0

    def to_csv(self, path) -> None:
        """Write the trace; float formatting is shortest-round-trip, so the
        same trace always produces the same bytes."""
        with open(path, "w", newline="") as fh:
            fh.write(",".join(CSV_COLUMNS) + "\n")
            for k in range(self.n_steps):
                row = (
                    self.t[k], self.u[k],
                    self.x[k, 0], self.x[k, 1], self.x[k, 2], self.x[k, 3],
                    self.x_hat[k, 0], self.x_hat[k, 1],
                    self.x_hat[k, 2], self.x_hat[k, 3],
                    self.bis_true[k], self.bis_meas[k], self.setpoint[k],
                )
                fh.write(",".join(repr(float(v)) for v in row) + "\n")

    @classmethod
    def from_csv(cls, path) -> "SimTrace":
        with open(path, newline="") as fh:
            header = fh.readline().strip()
            if header != ",".join(CSV_COLUMNS):
                raise ValueError(f"trace csv: unexpected header {header!r}")
            data = np.array(
                [[float(v) for v in line.split(",")] for line in fh if line.strip()]
            )
        if data.ndim != 2 or data.shape[1] != len(CSV_COLUMNS):
            raise ValueError("trace csv: malformed rows")
        return cls(
            t=data[:, 0], u=data[:, 1], x=data[:, 2:6], x_hat=data[:, 6:10],
            bis_true=data[:, 10], bis_meas=data[:, 11], setpoint=data[:, 12],
        )


@dataclass
class RunMetrics:
    """Summary numbers for one trace.

    settling_time is the first time from which the true BIS stays within
    +-5 of the setpoint; inf if that never happens. in_bound additionally
    requires settling within half the run and the BIS never leaving
    setpoint +- band afterwards; `reason` says why it is False.
    """

    settling_time: float
    undershoot: float
    total_drug: float
    steady_state_error: float
    in_bound: bool
    reason: str = ""

    def as_dict(self) -> dict:
        return {
            "settling_time_s": self.settling_time,
            "undershoot_bis": self.undershoot,
            "total_drug_ugkg": self.total_drug,
            "steady_state_error_bis": self.steady_state_error,
            "in_bound": self.in_bound,
            "reason": self.reason,
        }


def run_closed_loop(sc: Scenario, x0=None, x_hat0=None, u_prev0: float = 0.0) -> SimTrace:
    """Run one experiment; deterministic given the scenario (incl. seed).

    Per step: measure, (EKF predict/update when the controller uses one),
    controller move, record, plant advance. x0 / x_hat0 override the awake
    initial plant state and zero initial estimate when given.
    """
    plant_model = discretize(sc.patient, sc.ts)
    design_model = discretize(sc.nominal, sc.ts)
    n = sc.n_steps
    state = initial_state(plant_model, x0)
    rng = np.random.default_rng(sc.seed) if sc.noise_sd > 0.0 else None

    ekf = None
    if sc.controller_kind == "state_space_ekf":
        controller = StateSpaceMpc(sc.mpc, design_model, sc.nominal)
        ekf = ExtendedKalmanFilter(
            np.zeros(4) if x_hat0 is None else x_hat0,
            p0=sc.ekf.p0, q=sc.ekf.q, r=sc.ekf.r,
            delay_steps=design_model.delay_steps, mode=sc.ekf.mode,
        )
    else:
        controller = BaselineMpc(sc.mpc, design_model, sc.nominal)

    t = np.arange(n) * sc.ts
    u = np.empty(n)
    x = np.empty((n, 4))
    x_hat = np.full((n, 4), np.nan)
    bis_true = np.empty(n)
    bis_meas = np.empty(n)
    failures = []

    u_prev = float(u_prev0)
    for k in range(n):
        z = measure(state, sc.noise_sd, rng)
        if ekf is not None:
            if k > 0:
                ekf.predict(design_model, u_prev)
            ekf.update(z, sc.nominal)
            x_hat[k] = ekf.x_hat
            out = controller.step(ekf.x_hat, u_prev)
        else:
            out = controller.step(z, u_prev)
        if out.qp_status == "fallback":
            failures.append(k)
        u[k] = out.u
        x[k] = state.x
        bis_true[k] = bis_of(sc.patient, state.xe)
        bis_meas[k] = z
        state = step(plant_model, state, out.u)
        u_prev = out.u

    return SimTrace(
        t=t, u=u, x=x, x_hat=x_hat, bis_true=bis_true, bis_meas=bis_meas,
        setpoint=np.full(n, sc.mpc.setpoint), failures=failures,
    )


def compute_metrics(trace: SimTrace, band: float = 10.0) -> RunMetrics:
    """Metrics on the true BIS of a trace; see RunMetrics for definitions."""
    if trace.n_steps == 0:
        raise ValueError("metrics: empty trace")
    ts = trace.ts
    n = trace.n_steps
    err = trace.bis_true - trace.setpoint

    inside5 = np.abs(err) <= 5.0
    outside = np.where(~inside5)[0]
    settle_idx = 0 if outside.size == 0 else int(outside[-1]) + 1
    settled = settle_idx < n
    settling_time = settle_idx * ts if settled else math.inf

    undershoot = max(0.0, float(-err.min()))
    total_drug = float(np.trapezoid(trace.u, dx=ts)) / 60.0
    tail = max(1, int(math.ceil(0.2 * n)))
    steady_state_error = float(np.abs(err[-tail:]).mean())

    in_bound, reason = True, ""
    if not settled:
        in_bound, reason = False, "never settles into setpoint +- 5"
    elif settling_time > trace.t[-1] / 2.0 + ts / 2.0:
        in_bound, reason = False, "settles after half the run"
    elif settle_idx >= n - 1:
        in_bound, reason = False, "trace too short past settling"
    elif np.any(np.abs(err[settle_idx:]) > band):
        in_bound, reason = False, f"leaves setpoint +- {band} after settling"

    return RunMetrics(settling_time, undershoot, total_drug,
                      steady_state_error, in_bound, reason)


def _in_bound_at(sc: Scenario, td: float, band: float) -> bool:
    probe = replace(sc, patient=replace(sc.patient, td=td))
    return compute_metrics(run_closed_loop(probe), band).in_bound


def max_tolerable_delay(
    sc_template: Scenario,
    band: float = 10.0,
    resolution: float = 1.0,
    direction: str = "increase",
) -> float:
    """Largest delay difference (s) from the nominal Td still in bound.

    The true patient delay is moved away from the controller's nominal one
    (up by default, down with direction="decrease") and the in-bound
    boundary is bisected to within `resolution` on the resolution grid.
    Monotonicity of in_bound in the mismatch is assumed; it is spot-checked
    at the returned boundary, and a violation raises. If even the largest
    representable mismatch stays in bound, that cap is returned.
    """
    if resolution < sc_template.ts:
        raise ValueError("delay sweep: resolution must be >= ts")
    if direction not in ("increase", "decrease"):
        raise ValueError(f"delay sweep: unknown direction {direction!r}")

    base_td = sc_template.nominal.td
    sign = 1.0 if direction == "increase" else -1.0
    if direction == "increase":
        cap = sc_template.duration / 10.0 - base_td  # duration >= 10*Td
    else:
        cap = base_td
    cap = math.floor(cap / resolution) * resolution
    if cap < 0.0:
        raise ValueError("delay sweep: no room to sweep in this direction")

    if not _in_bound_at(sc_template, base_td, band):
        raise ValueError("delay sweep: out of bound already at zero mismatch "
                         "(controller mistuned)")
    if _in_bound_at(sc_template, base_td + sign * cap, band):
        return cap

    lo, hi = 0.0, cap  # in_bound holds at lo, fails at hi
    while hi - lo > resolution:
        mid = lo + math.floor((hi - lo) / 2.0 / resolution) * resolution
        mid = max(mid, lo + resolution)
        if _in_bound_at(sc_template, base_td + sign * mid, band):
            lo = mid
        else:
            hi = mid

    if not _in_bound_at(sc_template, base_td + sign * lo, band):
        raise RuntimeError("delay sweep: boundary spot check failed (in_bound "
                           "not monotone in the mismatch)")
    if lo + resolution <= cap and _in_bound_at(sc_template, base_td + sign * (lo + resolution), band):
        raise RuntimeError("delay sweep: boundary spot check failed (in_bound "
                           "not monotone in the mismatch)")
    return lo
