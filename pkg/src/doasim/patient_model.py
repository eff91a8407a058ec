"""Virtual patient: three-compartment propofol kinetics, effect site, sigmoid
BIS response, and a transport-delayed noisy BIS monitor.

State vector convention throughout: x = [x1, x2, x3, xe] with x1 the central,
x2 the shallow-peripheral, x3 the deep-peripheral and xe the effect-site
concentration, all in ug/mL. Infusion rates are in ug/kg/min.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

XE_INDEX = 3


@dataclass(frozen=True)
class PatientParams:
    """Per-patient model constants.

    Parameters
    ----------
    v1 : float
        Central compartment volume in liters (converted to mL internally so
        concentrations come out in ug/mL).
    k10, k12, k21, k13, k31 : float
        Elimination and inter-compartment rate constants, 1/s.
    ke0 : float
        Effect-site equilibration rate, 1/s.
    td : float
        Measurement transport delay, seconds.
    bis0 : float
        Awake BIS value.
    gamma : float
        Hill coefficient of the sigmoid response.
    ec50 : float
        Effect-site concentration giving half the awake BIS, ug/mL.
    weight : float
        Patient mass in kg, needed to convert ug/kg/min to a mass flow.
    """

    v1: float
    k10: float
    k12: float
    k21: float
    k13: float
    k31: float
    ke0: float
    td: float
    bis0: float
    gamma: float
    ec50: float
    weight: float = 70.0

    def __post_init__(self):
        positive = ("v1", "k10", "k12", "k21", "k13", "k31", "ke0", "ec50", "weight")
        for name in positive:
            value = getattr(self, name)
            if not math.isfinite(value) or value <= 0.0:
                raise ValueError(f"patient.{name}: must be finite and > 0, got {value}")
        if not math.isfinite(self.gamma) or self.gamma < 1.0:
            raise ValueError(f"patient.gamma: must be >= 1, got {self.gamma}")
        if not math.isfinite(self.td) or self.td < 0.0:
            raise ValueError(f"patient.td: must be >= 0, got {self.td}")
        if not math.isfinite(self.bis0) or not 0.0 < self.bis0 <= 100.0:
            raise ValueError(f"patient.bis0: must be in (0, 100], got {self.bis0}")

    @property
    def v1_ml(self) -> float:
        return self.v1 * 1000.0


def continuous_matrices(params: PatientParams) -> tuple[np.ndarray, np.ndarray]:
    """Continuous-time state-space matrices (A, B) of dx/dt = A x + B u.

    B converts an infusion in ug/kg/min into a central-compartment
    concentration rate in ug/mL/s.
    """
    k10, k12, k21 = params.k10, params.k12, params.k21
    k13, k31, ke0 = params.k13, params.k31, params.ke0
    a = np.array(
        [
            [-(k10 + k12 + k13), k21, k31, 0.0],
            [k12, -k21, 0.0, 0.0],
            [k13, 0.0, -k31, 0.0],
            [ke0, 0.0, 0.0, -ke0],
        ]
    )
    b = np.zeros((4, 1))
    b[0, 0] = params.weight / (60.0 * params.v1_ml)
    return a, b


@dataclass
class PatientState:
    """Compartment concentrations plus the BIS transport-delay buffer.

    ``delay_buffer[0]`` always holds the BIS value that the monitor shows
    now, i.e. the value computed ``delay_steps`` samples ago. The buffer
    length is fixed at construction.
    """

    x: np.ndarray
    delay_buffer: deque = field(repr=False)

    @property
    def xe(self) -> float:
        return float(self.x[XE_INDEX])

    @property
    def delayed_bis(self) -> float:
        return self.delay_buffer[0]


@dataclass(frozen=True)
class DiscreteModel:
    """Zero-order-hold discretization of the patient dynamics at period ts.

    ``a_d`` and ``b_d`` satisfy x[k+1] = a_d x[k] + b_d u[k] exactly for an
    input held constant over each sampling interval. ``delay_steps`` is the
    measurement delay rounded to whole samples.
    """

    a_d: np.ndarray
    b_d: np.ndarray
    ts: float
    delay_steps: int
    params: PatientParams


def bis_of(params: PatientParams, xe) -> float:
    """Sigmoid BIS response to the effect-site concentration xe.

    Returns bis0 * (1 - xe^gamma / (xe^gamma + ec50^gamma)); monotonically
    non-increasing in xe. Accepts a scalar or an ndarray.
    """
    xe = np.asarray(xe, dtype=float)
    if np.any(xe < 0.0):
        raise ValueError("bis_of: xe must be >= 0")
    ratio = xe**params.gamma
    out = params.bis0 * (1.0 - ratio / (ratio + params.ec50**params.gamma))
    return float(out) if out.ndim == 0 else out


def bis_slope(params: PatientParams, xe) -> float:
    """Derivative d BIS / d xe of the sigmoid response; always <= 0."""
    xe = np.asarray(xe, dtype=float)
    if np.any(xe < 0.0):
        raise ValueError("bis_slope: xe must be >= 0")
    g = params.gamma
    c_g = params.ec50**g
    out = -params.bis0 * g * xe ** (g - 1.0) * c_g / (xe**g + c_g) ** 2
    return float(out) if out.ndim == 0 else out


def continuous_derivative(params: PatientParams, state: PatientState, u: float) -> np.ndarray:
    """Concentration rates [dx1, dx2, dx3, dxe]/dt in ug/mL/s for infusion u."""
    a, b = continuous_matrices(params)
    return a @ state.x + b[:, 0] * u


def discretize(params: PatientParams, ts: float) -> DiscreteModel:
    """Exact ZOH discretization at sampling period ts (seconds).

    Uses the matrix exponential of the (4+1) augmented block [[A, B], [0, 0]]
    so that a_d = exp(A ts) and b_d = int_0^ts exp(A s) ds B.
    """
    if not math.isfinite(ts) or ts <= 0.0:
        raise ValueError(f"ts: must be finite and > 0, got {ts}")
    a, b = continuous_matrices(params)
    aug = np.zeros((5, 5))
    aug[:4, :4] = a * ts
    aug[:4, 4:] = b * ts
    m = expm(aug)
    return DiscreteModel(
        a_d=m[:4, :4],
        b_d=m[:4, 4:].copy(),
        ts=ts,
        delay_steps=int(round(params.td / ts)),
        params=params,
    )


def initial_state(model: DiscreteModel, x0: np.ndarray | None = None) -> PatientState:
    """Fresh patient state; all compartments zero (awake) unless x0 is given.

    The delay buffer is pre-filled with the BIS of the initial state, so the
    monitor shows the pre-drug value for the first delay_steps samples.
    """
    x = np.zeros(4) if x0 is None else np.asarray(x0, dtype=float).copy()
    bis = bis_of(model.params, x[XE_INDEX])
    buf = deque([bis] * (model.delay_steps + 1), maxlen=model.delay_steps + 1)
    return PatientState(x=x, delay_buffer=buf)


def step(model: DiscreteModel, state: PatientState, u: float) -> PatientState:
    """Advance one sampling period under constant infusion u (ug/kg/min).

    Pushes the new BIS into the delay buffer; the buffer head becomes the
    value the monitor reports next.
    """
    x_next = model.a_d @ state.x + model.b_d[:, 0] * u
    buf = deque(state.delay_buffer, maxlen=state.delay_buffer.maxlen)
    buf.append(bis_of(model.params, x_next[XE_INDEX]))
    return PatientState(x=x_next, delay_buffer=buf)


def measure(state: PatientState, noise_sd: float = 0.0, rng: np.random.Generator | None = None) -> float:
    """Monitor reading: delayed BIS plus Gaussian noise, clamped to [0, 100]."""
    if noise_sd < 0.0:
        raise ValueError("measure: noise_sd must be >= 0")
    value = state.delayed_bis
    if noise_sd > 0.0:
        if rng is None:
            raise ValueError("measure: an rng is required when noise_sd > 0")
        value += noise_sd * rng.standard_normal()
    return float(min(max(value, 0.0), 100.0))


def steady_state(params: PatientParams, u: float) -> np.ndarray:
    """Equilibrium concentrations under constant infusion u (linear solve)."""
    a, b = continuous_matrices(params)
    return np.linalg.solve(a, -b[:, 0] * u)


def effect_site_for_bis(params: PatientParams, bis_target: float) -> float:
    """Effect-site concentration at which the BIS equals bis_target."""
    if not 0.0 < bis_target < params.bis0:
        raise ValueError(f"bis_target: must be in (0, {params.bis0}), got {bis_target}")
    return params.ec50 * (params.bis0 / bis_target - 1.0) ** (1.0 / params.gamma)


def infusion_for_bis(params: PatientParams, bis_target: float) -> float:
    """Constant infusion (ug/kg/min) whose steady state hits bis_target."""
    xe_target = effect_site_for_bis(params, bis_target)
    _, b = continuous_matrices(params)
    # at equilibrium x1 = xe and k10 * x1 = b1 * u
    return xe_target * params.k10 / b[0, 0]
