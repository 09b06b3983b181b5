"""Coupled proposal simulation and likelihood-ratio weights.

Particles are propagated under an importance SDE

    ds = g(s, t) dt + B(t) dbeta,

while the state actually reported follows the scaled process

    ds* = L(t) B(t)^-1 ds,

driven by the same realized increments.  The running log likelihood
ratio Lambda between the law of the target SDE (drift f, dispersion L)
and the law of s* accumulates, per Euler step with left-endpoint
evaluation,

    d(s, s*, t) = f(s*, t) - L(t) B(t)^-1 g(s, t)
    dLambda = d^T L^-T Q^-1 dbeta - 0.5 d^T (L Q L^T)^-1 d dt.

exp(Lambda) is then the importance weight correcting expectations under
the proposal back to the target law.  For the Euler discretization this
weight is the exact likelihood ratio of the two discrete chains, so
E[exp(Lambda)] = 1 holds at any step size, not just in the limit.

Setting an ImportanceSpec's dispersion to None declares B identical to L;
the scaling L B^-1 is then treated as the exact identity, which keeps
bootstrap proposals (g = f) bit-exactly weight-free.
"""

from dataclasses import dataclass

import numpy as np

from ._linalg import as_square_matrix, guarded_inv, mat_vec, quad_form
from .exceptions import IntegrationError
from .sde import BrownianIncrements, DiffusionSpec

__all__ = [
    "ImportanceSpec", "CoupledResult", "SplitCoupledResult",
    "prior_proposal", "step_scaled_process", "step_llr",
    "step_llr_singular", "propagate_coupled", "propagate_coupled_split",
    "estimate_kl",
]


@dataclass
class ImportanceSpec:
    """Importance (proposal) SDE for one propagation interval.

    Attributes:
        drift: proposal drift g.  Its signature mirrors the drift of the
            model it is used with: (s, t) for SdeModel, (s1, s2, t) for
            SplitSdeModel.  May return per-particle batched values.
        dispersion: proposal dispersion B(t); a constant array (scalars
            promoted to 1x1, per-particle (N, s, s) batches allowed), a
            callable of t, or None meaning "B is L", in which case the
            scaling is skipped entirely rather than multiplied out.
    """

    drift: object
    dispersion: object = None


@dataclass
class CoupledResult:
    """Endpoint of one coupled propagation interval.

    Attributes:
        state: s*(t1), the weighted particle state (..., n).
        proposal_state: s(t1), the raw proposal endpoint (..., n).
        llr: accumulated log likelihood ratio Lambda(t1), shape (...,).
    """

    state: np.ndarray
    proposal_state: np.ndarray
    llr: np.ndarray


@dataclass
class SplitCoupledResult:
    """Like CoupledResult but for split (noise-free block) models."""

    state_det: np.ndarray
    state_stoch: np.ndarray
    proposal_det: np.ndarray
    proposal_stoch: np.ndarray
    llr: np.ndarray


def prior_proposal(model):
    """Bootstrap proposal: simulate the model itself, weights stay one.

    Works for SdeModel, SplitSdeModel and any model exposing a
    drift_stoch attribute for its noise-driven block.
    """
    stoch = getattr(model, "drift_stoch", None)
    if stoch is not None:
        return ImportanceSpec(drift=stoch, dispersion=None)
    return ImportanceSpec(drift=model.drift, dispersion=None)


def _matrix_at(value, t):
    """Evaluate an array-or-callable matrix spec at time t."""
    if value is None:
        return None
    if isinstance(value, DiffusionSpec):
        return value.at(t)
    if callable(value):
        out = np.asarray(value(t), dtype=float)
        return out.reshape(1, 1) if out.ndim == 0 else out
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    return arr


def _matrix_constant(value):
    if value is None:
        return True
    if isinstance(value, DiffusionSpec):
        return value.constant
    return not callable(value)


class _LlrOps:
    """Inverses used by the log-likelihood-ratio step, built once per time.

    scale is L B^-1 (None when B is declared identical to L), a_lin is
    L^-T Q^-1 and a_quad is (L Q L^T)^-1.
    """

    def __init__(self, l_mat, b_mat, q_mat, t):
        l_inv = guarded_inv(l_mat, "dispersion L", t)
        q_inv = guarded_inv(q_mat, "diffusion Q", t)
        self.l_mat = l_mat
        self.b_mat = b_mat
        self.scale = None if b_mat is None \
            else np.matmul(l_mat, guarded_inv(b_mat, "proposal dispersion B", t))
        self.a_lin = np.matmul(np.swapaxes(l_inv, -1, -2), q_inv)
        self.a_quad = guarded_inv(
            np.matmul(np.matmul(l_mat, q_mat), np.swapaxes(l_mat, -1, -2)),
            "L Q L^T", t)


def _llr_kernel(llr, f_val, g_val, ops, dt, dbeta):
    if ops.scale is None:
        d = f_val - g_val
    else:
        d = f_val - mat_vec(ops.scale, g_val)
    lin = np.sum(d * mat_vec(ops.a_lin, dbeta), axis=-1)
    quad = quad_form(d, ops.a_quad)
    return llr + lin - 0.5 * quad * dt


def step_scaled_process(s_star, dispersion_l, dispersion_b, t, ds):
    """Advance the scaled process: s* + L(t) B(t)^-1 ds.

    Args:
        s_star: current scaled states (..., n).
        dispersion_l: model dispersion L, array or callable of t.
        dispersion_b: proposal dispersion B, array, callable, or None for
            "B is L" (increment passes through unchanged).
        t: current time.
        ds: realized proposal increments (..., n).

    Returns:
        Updated scaled states.
    """
    s_star = np.asarray(s_star, dtype=float)
    ds = np.asarray(ds, dtype=float)
    if dispersion_b is None:
        return s_star + ds
    l_mat = _matrix_at(dispersion_l, t)
    b_mat = _matrix_at(dispersion_b, t)
    scale = np.matmul(l_mat, guarded_inv(b_mat, "proposal dispersion B", t))
    return s_star + mat_vec(scale, ds)


def step_llr(llr, f_at_sstar, g_at_s, dispersion_l, dispersion_b,
             diffusion_q, t, dt, dbeta):
    """One Euler update of the log likelihood ratio.

    Args:
        llr: running Lambda, shape (...,) or scalar.
        f_at_sstar: target drift evaluated at s*(t), shape (..., s).
        g_at_s: proposal drift evaluated at s(t), shape (..., s).
        dispersion_l: L, array or callable of t.
        dispersion_b: B, array, callable, or None for "B is L".
        diffusion_q: Q, array, callable or DiffusionSpec.
        t: left endpoint of the step.
        dt: step size.
        dbeta: Brownian increment used by the proposal on this step.

    Returns:
        Updated Lambda.
    """
    ops = _LlrOps(_matrix_at(dispersion_l, t), _matrix_at(dispersion_b, t),
                  _matrix_at(diffusion_q, t), t)
    return _llr_kernel(np.asarray(llr, dtype=float),
                       np.asarray(f_at_sstar, dtype=float),
                       np.asarray(g_at_s, dtype=float),
                       ops, dt, np.asarray(dbeta, dtype=float))


def step_llr_singular(llr, f2_at_sstar, g2_at_s, dispersion_l, dispersion_b,
                      diffusion_q, t, dt, dbeta):
    """Log-likelihood-ratio step for split models.

    Identical arithmetic to step_llr; the drifts are the stochastic-block
    drift f2 evaluated at the joint scaled state (s1*, s2*) and the
    proposal drift g2 evaluated at the joint proposal state (s1, s2).
    """
    return step_llr(llr, f2_at_sstar, g2_at_s, dispersion_l, dispersion_b,
                    diffusion_q, t, dt, dbeta)


def _increment_values(incs, grid):
    vals = incs.values if isinstance(incs, BrownianIncrements) else np.asarray(incs, dtype=float)
    if vals.shape[-2] != grid.n_steps:
        raise ValueError("increments cover %d steps, grid has %d"
                         % (vals.shape[-2], grid.n_steps))
    return vals


def _check_finite(arr, what, t):
    if not np.all(np.isfinite(arr)):
        raise IntegrationError("%s became non-finite at t=%g" % (what, t))


def propagate_coupled(model, imp, x_prev, grid, incs):
    """Propagate proposal, scaled state and weight over one interval.

    Runs the proposal SDE, the scaled process and the Lambda recursion in
    lockstep over every step of the grid, sharing the given increments.

    Args:
        model: SdeModel (target dynamics).
        imp: ImportanceSpec (proposal dynamics).
        x_prev: particle states at grid.t0, shape (..., n); both s and s*
            start here.
        grid: TimeGrid for the interval.
        incs: BrownianIncrements (..., n_steps, s) matching the batch.

    Returns:
        CoupledResult with s*(t1), s(t1) and Lambda(t1).
    """
    x = np.asarray(x_prev, dtype=float)
    vals = _increment_values(incs, grid)
    s = x.copy()
    s_star = x.copy()
    llr = np.zeros(x.shape[:-1])
    dt = grid.dt

    hoisted = model.dispersion.constant and model.diffusion.constant \
        and _matrix_constant(imp.dispersion)
    ops = _LlrOps(model.dispersion.at(grid.t0),
                  _matrix_at(imp.dispersion, grid.t0),
                  model.diffusion.at(grid.t0), grid.t0) if hoisted else None

    for j in range(grid.n_steps):
        t = grid.t0 + j * dt
        if not hoisted:
            ops = _LlrOps(model.dispersion.at(t), _matrix_at(imp.dispersion, t),
                          model.diffusion.at(t), t)
        g_val = np.asarray(imp.drift(s, t), dtype=float)
        f_val = np.asarray(model.drift(s_star, t), dtype=float)
        _check_finite(g_val, "proposal drift", t)
        _check_finite(f_val, "drift", t)
        db = vals[..., j, :]
        noise_mat = ops.l_mat if ops.b_mat is None else ops.b_mat
        ds = g_val * dt + mat_vec(noise_mat, db)
        llr = _llr_kernel(llr, f_val, g_val, ops, dt, db)
        s = s + ds
        s_star = s_star + ds if ops.scale is None else s_star + mat_vec(ops.scale, ds)
        _check_finite(s_star, "state", t + dt)
    _check_finite(llr, "log likelihood ratio", grid.t1)
    return CoupledResult(state=s_star, proposal_state=s, llr=llr)


def propagate_coupled_split(model, imp, x1_prev, x2_prev, grid, incs):
    """propagate_coupled for split models (noise-free block included).

    The noise-free blocks advance by forward Euler alongside both the
    proposal pair (s1, s2) and the scaled pair (s1*, s2*); the weight
    recursion uses the stochastic-block drifts only.

    Args:
        model: SplitSdeModel.
        imp: ImportanceSpec with drift g2(s1, s2, t).
        x1_prev: noise-free block states (..., d1) at grid.t0.
        x2_prev: stochastic block states (..., d2) at grid.t0.
        grid: TimeGrid.
        incs: BrownianIncrements (..., n_steps, d2).

    Returns:
        SplitCoupledResult.
    """
    s1 = np.asarray(x1_prev, dtype=float).copy()
    s2 = np.asarray(x2_prev, dtype=float).copy()
    s1_star = s1.copy()
    s2_star = s2.copy()
    vals = _increment_values(incs, grid)
    llr = np.zeros(s2.shape[:-1])
    dt = grid.dt

    hoisted = model.dispersion.constant and model.diffusion.constant \
        and _matrix_constant(imp.dispersion)
    ops = _LlrOps(model.dispersion.at(grid.t0),
                  _matrix_at(imp.dispersion, grid.t0),
                  model.diffusion.at(grid.t0), grid.t0) if hoisted else None

    for j in range(grid.n_steps):
        t = grid.t0 + j * dt
        if not hoisted:
            ops = _LlrOps(model.dispersion.at(t), _matrix_at(imp.dispersion, t),
                          model.diffusion.at(t), t)
        g_val = np.asarray(imp.drift(s1, s2, t), dtype=float)
        f2_val = np.asarray(model.drift_stoch(s1_star, s2_star, t), dtype=float)
        f1_val = np.asarray(model.drift_det(s1, s2, t), dtype=float)
        f1_star_val = np.asarray(model.drift_det(s1_star, s2_star, t), dtype=float)
        for arr, what in ((g_val, "proposal drift"), (f2_val, "drift"),
                          (f1_val, "drift"), (f1_star_val, "drift")):
            _check_finite(arr, what, t)
        db = vals[..., j, :]
        noise_mat = ops.l_mat if ops.b_mat is None else ops.b_mat
        ds2 = g_val * dt + mat_vec(noise_mat, db)
        llr = _llr_kernel(llr, f2_val, g_val, ops, dt, db)
        s1 = s1 + f1_val * dt
        s2 = s2 + ds2
        s1_star = s1_star + f1_star_val * dt
        s2_star = s2_star + ds2 if ops.scale is None \
            else s2_star + mat_vec(ops.scale, ds2)
        if model.constrain is not None:
            s1, s2 = model.constrain(s1, s2)
            s1_star, s2_star = model.constrain(s1_star, s2_star)
        _check_finite(s1_star, "state", t + dt)
        _check_finite(s2_star, "state", t + dt)
    _check_finite(llr, "log likelihood ratio", grid.t1)
    return SplitCoupledResult(state_det=s1_star, state_stoch=s2_star,
                              proposal_det=s1, proposal_stoch=s2, llr=llr)


def estimate_kl(drift_p, drift_q, sigma, paths, grid):
    """Monte Carlo estimate of KL[q || p] between two SDE laws.

    Both laws share the diffusion term with constant covariance sigma;
    they differ only in drift.  Along paths sampled under the q-law,

        KL = E_q[ 0.5 * integral (f_p - f_q)^T sigma^-1 (f_p - f_q) dt ],

    discretized with left-endpoint evaluation on the grid.

    Args:
        drift_p: drift of the reference law, callable (x, t).
        drift_q: drift of the sampling law, callable (x, t).
        sigma: diffusion covariance (scalar or matrix).
        paths: states under q, shape (n_paths, n_steps + 1, n).
        grid: TimeGrid the paths were simulated on.

    Returns:
        Scalar KL estimate (nonnegative up to Monte Carlo noise).
    """
    paths = np.asarray(paths, dtype=float)
    if paths.ndim == 2:
        paths = paths[None]
    if paths.shape[-2] != grid.n_steps + 1:
        raise ValueError("paths have %d grid points, grid has %d"
                         % (paths.shape[-2], grid.n_steps + 1))
    sig_inv = guarded_inv(as_square_matrix(sigma, "sigma"), "sigma")
    dt = grid.dt
    total = np.zeros(paths.shape[0])
    for j in range(grid.n_steps):
        t = grid.t0 + j * dt
        x = paths[:, j, :]
        delta = np.asarray(drift_p(x, t), dtype=float) \
            - np.asarray(drift_q(x, t), dtype=float)
        total += quad_form(delta, sig_inv) * dt
    return float(0.5 * np.mean(total))
