"""Receding-horizon BIS controllers.

Two flavors share one QP backbone:

* StateSpaceMpc - consumes the EKF state estimate, propagates the nominal
  linear model forward, and costs tangent-linearized BIS predictions.
* BaselineMpc - output feedback only: keeps its own open-loop nominal model
  and corrects all predictions by the constant-disturbance offset between
  the measured and modeled BIS (classic dynamic-matrix style), so it
  tracks without ever seeing a state estimate.

Both optimize the move sequence du (changes of the infusion rate), which
bakes integral action into the loop, and apply only the first move.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .patient_model import XE_INDEX, DiscreteModel, PatientParams, bis_of, bis_slope
from .qp_solver import QpProblem, qp_solve

# Predictions are linearized at the current effect-site estimate, but never
# below this fraction of EC50: the sigmoid is flat at xe = 0, and a tangent
# taken there has zero gain, which would leave the controller convinced
# that dosing does nothing at exactly the moment induction starts.
LINEARIZATION_FLOOR = 0.3


@dataclass
class MpcConfig:
    """Horizon, weights and input limits of the receding-horizon problem.

    delta weighs the BIS error at each costed step j = n1..n2; alpha weighs
    each of the nu moves. Scalars broadcast to full sequences.
    """

    n1: int = 1
    n2: int = 60
    nu: int = 5
    delta: np.ndarray = 1.0
    alpha: np.ndarray = 10.0
    setpoint: float = 50.0
    u_min: float = 0.0
    u_max: float = 300.0
    du_max: float = 200.0

    def __post_init__(self):
        self.n1, self.n2, self.nu = int(self.n1), int(self.n2), int(self.nu)
        if not 1 <= self.n1 <= self.n2:
            raise ValueError(f"mpc: need 1 <= n1 <= n2, got n1={self.n1}, n2={self.n2}")
        if not 1 <= self.nu <= self.n2 - self.n1 + 1:
            raise ValueError(f"mpc: need 1 <= nu <= n2 - n1 + 1, got nu={self.nu}")
        n_out = self.n2 - self.n1 + 1
        self.delta = np.broadcast_to(np.asarray(self.delta, dtype=float), (n_out,)).copy()
        self.alpha = np.broadcast_to(np.asarray(self.alpha, dtype=float), (self.nu,)).copy()
        if np.any(self.delta < 0.0) or np.any(self.alpha < 0.0):
            raise ValueError("mpc: weights must be >= 0")
        if not np.any(self.delta > 0.0):
            raise ValueError("mpc: at least one delta weight must be > 0")
        if not self.u_min <= self.u_max:
            raise ValueError(f"mpc: need u_min <= u_max, got [{self.u_min}, {self.u_max}]")
        if not self.du_max > 0.0:
            raise ValueError(f"mpc: du_max must be > 0, got {self.du_max}")
        if not 0.0 < self.setpoint < 100.0:
            raise ValueError(f"mpc: setpoint must be in (0, 100), got {self.setpoint}")


@dataclass
class ControllerOutput:
    """One applied move plus everything needed to audit it."""

    u: float
    predicted_bis: np.ndarray = field(repr=False)
    qp_status: str
    diagnostics: dict = field(repr=False)


class _HorizonPredictor:
    """Precomputed step/free-response machinery shared by both controllers.

    For the nominal discrete model: xe_row[j] is the xe row of A^j, and
    step_resp[j] the xe response j steps after a unit input step (zero for
    j <= 0). dyn_matrix maps the nu moves to xe at the costed steps, with
    an optional output delay shifting which step each row sees.
    """

    def __init__(self, cfg: MpcConfig, model: DiscreteModel, output_delay: int = 0):
        self.cfg = cfg
        self.model = model
        self.output_delay = output_delay
        n2 = cfg.n2
        a_pow = np.eye(4)
        xe_rows = [a_pow[XE_INDEX].copy()]
        cum = np.zeros(4)
        steps = [0.0]
        for _ in range(n2):
            cum = cum + a_pow @ model.b_d[:, 0]
            a_pow = model.a_d @ a_pow
            xe_rows.append(a_pow[XE_INDEX].copy())
            steps.append(float(cum[XE_INDEX]))
        self.xe_rows = np.array(xe_rows)  # (n2+1, 4)
        self.step_resp = np.array(steps)  # (n2+1,)

        j_idx = np.arange(cfg.n1, n2 + 1) - output_delay  # model step each row sees
        self.row_steps = j_idx
        dyn = np.zeros((j_idx.size, cfg.nu))
        for r, j in enumerate(j_idx):
            for k in range(cfg.nu):
                if j - k >= 1:
                    dyn[r, k] = self.step_resp[j - k]
        self.dyn_matrix = dyn
        d_w = cfg.delta
        self.gtd = dyn.T * d_w  # (nu, n_out)
        self.gtdg = self.gtd @ dyn  # (nu, nu)
        t_mat = np.tril(np.ones((cfg.nu, cfg.nu)))
        self.cum_moves = np.vstack([t_mat, -t_mat])

    def free_xe(self, x_now: np.ndarray, u_prev: float, xe_past: list[float]) -> np.ndarray:
        """xe at each costed row if the input were frozen at u_prev.

        Rows that look j steps ahead of x_now take A^j x_now plus the held
        input's step response; rows still inside the output delay read the
        recorded past (xe_past[-1] is now, xe_past[-1 - i] is i steps ago).
        """
        out = np.empty(self.row_steps.size)
        for r, j in enumerate(self.row_steps):
            if j >= 0:
                out[r] = self.xe_rows[j] @ x_now + self.step_resp[j] * u_prev
            else:
                out[r] = xe_past[j - 1]  # j < 0: -(|j|+1) from the end
        return out

    def solve_moves(self, bis_free: np.ndarray, u_prev: float, gain: float, lam0):
        """QP over the nu moves for tangent gain and free-response BIS."""
        cfg = self.cfg
        err = bis_free - cfg.setpoint
        h = 2.0 * (gain * gain * self.gtdg + np.diag(cfg.alpha))
        f = 2.0 * gain * (self.gtd @ err)
        bounds_hi = np.full(cfg.nu, cfg.u_max - u_prev)
        bounds_lo = np.full(cfg.nu, u_prev - cfg.u_min)
        prob = QpProblem(
            h=h, f=f,
            lb=np.full(cfg.nu, -cfg.du_max), ub=np.full(cfg.nu, cfg.du_max),
            a_ineq=self.cum_moves, b_ineq=np.concatenate([bounds_hi, bounds_lo]),
        )
        return qp_solve(prob, lam0=lam0)


def _first_move(cfg: MpcConfig, u_prev: float, du: float) -> float:
    """Apply the move with both limits enforced exactly."""
    du = min(max(du, -cfg.du_max), cfg.du_max)
    return min(max(u_prev + du, cfg.u_min), cfg.u_max)


def _active_flags(cfg: MpcConfig, active: np.ndarray) -> dict:
    nu = cfg.nu
    return {
        "u_upper_active": active[0:nu].copy(),
        "u_lower_active": active[nu:2 * nu].copy(),
        "du_upper_active": active[2 * nu:3 * nu].copy(),
        "du_lower_active": active[3 * nu:4 * nu].copy(),
    }


class StateSpaceMpc:
    """MPC over the EKF state estimate (the proposed scheme).

    The controller only ever knows the nominal model - including the
    nominal measurement delay - so plant mismatch shows up as estimation
    and prediction error, exactly the axis the delay sweep probes.
    """

    def __init__(self, cfg: MpcConfig, model: DiscreteModel, params: PatientParams):
        self.cfg = cfg
        self.params = params
        self.predictor = _HorizonPredictor(cfg, model)
        self._lam = None

    def step(self, x_hat: np.ndarray, u_prev: float) -> ControllerOutput:
        """One receding-horizon move from the current state estimate.

        x_hat must be componentwise >= 0 (the estimator clamps).
        """
        cfg, params = self.cfg, self.params
        u_prev = min(max(u_prev, cfg.u_min), cfg.u_max)
        xe_lin = max(float(x_hat[XE_INDEX]), LINEARIZATION_FLOOR * params.ec50)
        gain = bis_slope(params, xe_lin)
        offset = bis_of(params, xe_lin) - gain * xe_lin

        xe_free = self.predictor.free_xe(np.asarray(x_hat, dtype=float), u_prev, [])
        bis_free = offset + gain * xe_free
        try:
            sol = self.predictor.solve_moves(bis_free, u_prev, gain, self._lam)
        except ValueError:
            self._lam = None
            return ControllerOutput(
                u=_first_move(cfg, u_prev, 0.0),
                predicted_bis=bis_free.copy(),
                qp_status="fallback",
                diagnostics={"xe_lin": xe_lin, "fallback": True},
            )
        self._lam = sol.lam
        u = _first_move(cfg, u_prev, float(sol.u[0]))
        predicted = bis_free + gain * (self.predictor.dyn_matrix @ sol.u)
        diagnostics = {"xe_lin": xe_lin, "fallback": False,
                       "qp_iterations": sol.iterations, "moves": sol.u.copy()}
        diagnostics.update(_active_flags(cfg, sol.active))
        return ControllerOutput(u=u, predicted_bis=predicted,
                                qp_status=sol.status, diagnostics=diagnostics)


class BaselineMpc:
    """Output-feedback MPC: nominal model plus constant-offset correction.

    The internal model runs open loop on the applied inputs; the mismatch
    between the measured BIS and the model's delayed BIS is treated as a
    constant disturbance over the horizon, which makes steady-state offsets
    vanish without any state estimation.
    """

    def __init__(self, cfg: MpcConfig, model: DiscreteModel, params: PatientParams):
        self.cfg = cfg
        self.params = params
        self.predictor = _HorizonPredictor(cfg, model, output_delay=model.delay_steps)
        self.x_model = np.zeros(4)
        self.xe_past = deque([0.0] * (model.delay_steps + 1), maxlen=model.delay_steps + 1)
        self._lam = None
        self._model = model

    @property
    def delayed_model_bis(self) -> float:
        """What the monitor would read now if the plant were the model."""
        return bis_of(self.params, self.xe_past[0])

    def step(self, z: float, u_prev: float) -> ControllerOutput:
        """One receding-horizon move from the measured BIS z in [0, 100]."""
        cfg, params = self.cfg, self.params
        u_prev = min(max(u_prev, cfg.u_min), cfg.u_max)
        bias = z - self.delayed_model_bis
        xe_lin = max(float(self.x_model[XE_INDEX]), LINEARIZATION_FLOOR * params.ec50)
        gain = bis_slope(params, xe_lin)
        offset = bis_of(params, xe_lin) - gain * xe_lin

        xe_free = self.predictor.free_xe(self.x_model, u_prev, list(self.xe_past))
        bis_free = offset + gain * xe_free + bias
        try:
            sol = self.predictor.solve_moves(bis_free, u_prev, gain, self._lam)
        except ValueError:
            self._lam = None
            out = ControllerOutput(
                u=_first_move(cfg, u_prev, 0.0),
                predicted_bis=bis_free.copy(),
                qp_status="fallback",
                diagnostics={"xe_lin": xe_lin, "bias": bias, "fallback": True},
            )
            self._advance(out.u)
            return out
        self._lam = sol.lam
        u = _first_move(cfg, u_prev, float(sol.u[0]))
        predicted = bis_free + gain * (self.predictor.dyn_matrix @ sol.u)
        diagnostics = {"xe_lin": xe_lin, "bias": bias, "fallback": False,
                       "qp_iterations": sol.iterations, "moves": sol.u.copy()}
        diagnostics.update(_active_flags(cfg, sol.active))
        self._advance(u)
        return ControllerOutput(u=u, predicted_bis=predicted,
                                qp_status=sol.status, diagnostics=diagnostics)

    def _advance(self, u: float) -> None:
        self.x_model = self._model.a_d @ self.x_model + self._model.b_d[:, 0] * u
        self.xe_past.append(float(self.x_model[XE_INDEX]))
