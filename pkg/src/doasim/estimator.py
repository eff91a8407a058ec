"""Extended Kalman filter for the hidden compartment concentrations.

The process model is linear, so prediction is the exact Kalman step; only
the BIS measurement map is nonlinear and gets linearized at each update.

The monitor reading at step k reflects the state delay_steps samples ago.
Rather than augmenting the state with delay stages, the filter core runs
at the monitor's time base — where measurement and estimate line up
exactly — and the current-time estimate handed to the controller is the
lagged estimate rolled forward through the buffered recent inputs.
Correcting the current-time state directly with the stale innovation is
tempting but unstable for delays of ~10+ samples: every innovation re-sees
the still-uncorrected old error, so the loop overcorrects and limit-cycles.
"""

from __future__ import annotations

import math
from collections import deque

import numpy as np

from .patient_model import XE_INDEX, DiscreteModel, PatientParams, bis_of, bis_slope

LINEARIZATION_MODES = ("at_estimate", "at_ec50")


class ExtendedKalmanFilter:
    """EKF over the four concentrations with delayed-measurement alignment.

    Parameters
    ----------
    x_hat0 : array_like
        Initial state estimate, clamped to >= 0.
    p0, q : array_like
        Initial and process-noise covariances; scalars and 4-vectors are
        promoted to diagonal matrices.
    r : float
        Measurement noise variance, BIS units squared; must be > 0.
    delay_steps : int
        Monitor transport delay in samples.
    mode : str
        Where the measurement map is linearized: "at_estimate" (standard
        EKF, the lagged xe estimate) or "at_ec50" (fixed point of maximum
        sigmoid slope).

    Attributes
    ----------
    x_lag, p : lagged-time state estimate and its covariance.
    x_hat : current-time state estimate (read-only property).
    history : ring buffer of the last delay_steps + 1 current-time
        estimates, oldest first.
    """

    def __init__(self, x_hat0, p0=10.0, q=1e-6, r=1.0, delay_steps=0, mode="at_estimate"):
        if mode not in LINEARIZATION_MODES:
            raise ValueError(f"ekf.mode: expected one of {LINEARIZATION_MODES}, got {mode!r}")
        if not math.isfinite(r) or r <= 0.0:
            raise ValueError(f"ekf.r: must be finite and > 0, got {r}")
        if delay_steps < 0:
            raise ValueError(f"ekf.delay_steps: must be >= 0, got {delay_steps}")
        self.x_lag = np.maximum(np.asarray(x_hat0, dtype=float).ravel().copy(), 0.0)
        if self.x_lag.shape != (4,):
            raise ValueError("ekf.x_hat0: expected 4 components")
        self.p = _as_cov(p0, "p0")
        self.q = _as_cov(q, "q")
        self.r = float(r)
        self.mode = mode
        self.delay_steps = int(delay_steps)
        self._u_pending: deque[float] = deque()  # inputs the lagged core has not absorbed
        self._model: DiscreteModel | None = None
        self.history = deque([self.x_lag.copy()], maxlen=self.delay_steps + 1)

    @property
    def x_hat(self) -> np.ndarray:
        """Current-time estimate: lagged estimate rolled through recent inputs."""
        x = self.x_lag
        for u in self._u_pending:
            x = self._model.a_d @ x + self._model.b_d[:, 0] * u
        return np.maximum(x, 0.0)

    @property
    def x_hat_delayed(self) -> np.ndarray:
        """The estimate the current monitor reading refers to."""
        return self.x_lag

    def predict(self, model: DiscreteModel, u: float) -> None:
        """Time update under the just-applied infusion u.

        The lagged core only advances once the measurement horizon has
        caught up with a given input; until then the input waits in the
        rollout buffer and the covariance stays put.
        """
        self._model = model
        self._u_pending.append(float(u))
        if len(self._u_pending) > self.delay_steps:
            u_old = self._u_pending.popleft()
            self.x_lag = model.a_d @ self.x_lag + model.b_d[:, 0] * u_old
            self.p = model.a_d @ self.p @ model.a_d.T + self.q
        self.history.append(self.x_hat)

    def update(self, z: float, params: PatientParams) -> bool:
        """Measurement update at the lagged time, where z and estimate align.

        Returns True when the measurement was applied; a non-finite z is
        rejected and leaves the state untouched (False).
        """
        if not math.isfinite(z):
            return False
        xe_lag = float(self.x_lag[XE_INDEX])
        predicted = bis_of(params, xe_lag)
        xe_lin = params.ec50 if self.mode == "at_ec50" else xe_lag
        slope = bis_slope(params, xe_lin)

        # H = [0, 0, 0, slope]; scalar innovation algebra written out
        s = slope * self.p[XE_INDEX, XE_INDEX] * slope + self.r
        k_gain = self.p[:, XE_INDEX] * slope / s
        self.x_lag = np.maximum(self.x_lag + k_gain * (z - predicted), 0.0)
        ikh = np.eye(4)
        ikh[:, XE_INDEX] -= k_gain * slope
        self.p = ikh @ self.p
        self.p = 0.5 * (self.p + self.p.T)
        if self.history:
            self.history[-1] = self.x_hat  # newest entry reflects the update
        return True


def _as_cov(value, name: str) -> np.ndarray:
    """Promote a scalar / 4-vector / 4x4 matrix to a full covariance."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.eye(4) * float(arr)
    elif arr.ndim == 1 and arr.shape == (4,):
        arr = np.diag(arr)
    if arr.shape != (4, 4):
        raise ValueError(f"ekf.{name}: expected scalar, 4-vector or 4x4 matrix")
    if not np.all(np.isfinite(arr)) or np.any(np.diag(arr) < 0.0):
        raise ValueError(f"ekf.{name}: must be finite with nonnegative diagonal")
    return 0.5 * (arr + arr.T)
