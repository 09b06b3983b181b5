"""Data-driven proposal construction from approximate Gaussian filtering.

The recipe per particle and measurement interval: start an extended
Kalman prediction from the particle's current state (a Dirac, so the
initial covariance is zero), condition the predicted Gaussian on the
upcoming measurement, and turn the resulting endpoint marginal of the
noise-driven component into a constant-coefficient bridge proposal

    g = (m_k - x_prev) / dt,        B = sqrt(P_k / (q dt)),

whose Euler endpoint has exactly mean m_k and variance P_k.
"""

from dataclasses import dataclass

import numpy as np

from ._linalg import symmetrize
from .exceptions import IntegrationError
from .girsanov import ImportanceSpec
from .raoblackwell import _gaussian_condition

__all__ = ["EkfMoments", "BridgeSpec", "ekf_predict", "ekf_condition",
           "build_bridge"]


@dataclass
class EkfMoments:
    """Mean and covariance of an extended Kalman prediction.

    Attributes:
        mean: (..., n).
        cov: (..., n, n); starts at zero when predicting from a particle.
    """

    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def from_states(cls, states):
        """Dirac moments at the given states (zero covariance)."""
        states = np.asarray(states, dtype=float)
        n = states.shape[-1]
        return cls(states.copy(), np.zeros(states.shape[:-1] + (n, n)))


def ekf_predict(moments, drift, jacobian, q_mat, grid):
    """Euler integration of the extended Kalman moment ODEs.

        dm/dt = f(m, t)
        dP/dt = F(m, t) P + P F(m, t)^T + Q

    Args:
        moments: EkfMoments at grid.t0.
        drift: callable (x, t) -> (..., n), the full-state drift.
        jacobian: callable (x, t) -> (..., n, n), its state Jacobian.
        q_mat: process noise covariance injected per unit time, (n, n)
            (zeros on noise-free components).
        grid: TimeGrid.

    Returns:
        EkfMoments at grid.t1 with symmetrized covariance.
    """
    mean = np.asarray(moments.mean, dtype=float).copy()
    cov = np.asarray(moments.cov, dtype=float).copy()
    q = np.asarray(q_mat, dtype=float)
    dt = grid.dt
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(grid.n_steps):
            t = grid.t0 + j * dt
            f_val = np.asarray(drift(mean, t), dtype=float)
            f_jac = np.asarray(jacobian(mean, t), dtype=float)
            if not (np.all(np.isfinite(f_val)) and np.all(np.isfinite(f_jac))):
                raise IntegrationError("EKF drift non-finite at t=%g" % t)
            fp = np.matmul(f_jac, cov)
            cov = symmetrize(cov + (fp + np.swapaxes(fp, -1, -2) + q) * dt)
            mean = mean + f_val * dt
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
        raise IntegrationError("EKF moments non-finite at t=%g" % grid.t1)
    return EkfMoments(mean, cov)


def ekf_condition(moments, h_mat, r_mat, y):
    """Condition predicted moments on a measurement y = H x + N(0, R).

    Runs the same arithmetic as the Kalman measurement update (shared
    implementation), so an EKF built from these pieces matches the
    marginalized filter's update bit for bit.

    Args:
        moments: EkfMoments before the update.
        h_mat: (..., m, n) measurement matrix (1-d input treated as one row).
        r_mat: (..., m, m) noise covariance; scalars promoted.
        y: measurement value(s).

    Returns:
        EkfMoments after the update.
    """
    h = np.asarray(h_mat, dtype=float)
    if h.ndim == 1:
        h = h[None, :]
    r = np.asarray(r_mat, dtype=float)
    if r.ndim == 0:
        r = r.reshape(1, 1)
    mean, cov, _, _ = _gaussian_condition(
        np.asarray(moments.mean, dtype=float),
        np.asarray(moments.cov, dtype=float), h, r, y)
    return EkfMoments(mean, cov)


@dataclass
class BridgeSpec:
    """Endpoint-matched constant bridge for one noise-driven component.

    Attributes:
        target_mean: desired endpoint mean m_k, shape (...,).
        target_var: desired endpoint variance P_k, floored away from zero.
        dt: interval length the bridge spans.
        q: diffusion coefficient of the component under the model.
    """

    target_mean: np.ndarray
    target_var: np.ndarray
    dt: float
    q: float

    def __post_init__(self):
        if self.dt <= 0 or self.q <= 0:
            raise ValueError("bridge needs dt > 0 and q > 0")


# Relative floor on the target variance, in units of the prior endpoint
# variance q * dt; keeps B away from zero when the EKF collapses.
VAR_FLOOR = 1e-8


def build_bridge(x_prev, posterior, dt, q, index):
    """Importance spec driving one component toward a Gaussian endpoint.

    Args:
        x_prev: particle states at the interval start, (..., n).
        posterior: EkfMoments conditioned on the upcoming measurement.
        dt: interval length.
        q: diffusion coefficient of the bridged component.
        index: which state component the Brownian noise drives.

    Returns:
        ImportanceSpec whose drift is the constant (m_k - x_prev) / dt per
        particle and whose dispersion is sqrt(P_k / (q dt)); simulating it
        with Euler steps reproduces mean m_k and variance P_k at the
        interval end exactly.
    """
    x_prev = np.asarray(x_prev, dtype=float)
    m_k = np.asarray(posterior.mean, dtype=float)[..., index]
    p_k = np.asarray(posterior.cov, dtype=float)[..., index, index]
    p_k = np.maximum(p_k, VAR_FLOOR * q * dt)
    spec = BridgeSpec(target_mean=m_k, target_var=p_k, dt=float(dt), q=float(q))

    g_const = (spec.target_mean - x_prev[..., index]) / spec.dt
    b_scalar = np.sqrt(spec.target_var / (spec.q * spec.dt))
    b_mat = b_scalar[..., None, None]

    def drift(*args):
        # Last positional is t, second to last the stochastic block state.
        block = args[-2]
        return np.broadcast_to(g_const[..., None], np.shape(block))

    return ImportanceSpec(drift=drift, dispersion=b_mat)
