"""Particle sets, weight bookkeeping, resampling and filter loops.

Weights are carried in log domain and normalized after every measurement
update.  Each particle slot owns its own random generator derived from a
single master seed, and resampling uses a dedicated generator, so runs
are reproducible and independent of how the particle batch is chunked
across worker threads.
"""

import concurrent.futures
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DegeneracyError, IntegrationError
from .girsanov import ImportanceSpec, propagate_coupled, propagate_coupled_split
from .sde import BrownianIncrements, SdeModel, SplitSdeModel, TimeGrid

__all__ = [
    "Particle", "ParticleSet", "MeasurementModel", "StepStats",
    "FilterConfig", "SummaryRow", "FilterResult", "seed_streams",
    "init_particle_set", "draw_increments", "gaussian_measurement",
    "normalize_log_weights", "effective_sample_size",
    "systematic_resample_indices", "systematic_resample",
    "finish_step", "sir_step", "sir_split_step", "run_filter",
]


def _logsumexp(lw):
    m = np.max(lw)
    if m == -np.inf:
        return -np.inf
    return float(m + np.log(np.sum(np.exp(lw - m))))


@dataclass(frozen=True)
class Particle:
    """Read-only view of one particle (state, log weight, payloads)."""

    state: np.ndarray
    log_weight: float
    gauss: object = None
    stats: object = None


@dataclass
class ParticleSet:
    """A weighted particle population.

    Attributes:
        states: sampled states, shape (N, n).  For split models this is
            the concatenated (x1, x2) state.
        log_weights: normalized log weights, shape (N,).
        streams: list of N numpy Generators, one per particle slot.
            Streams stay bound to slots across resampling.
        step_index: number of measurement updates applied so far.
        gauss: optional marginalized Gaussian block (mean (N, p),
            cov (N, p, p)).
        stats: optional per-particle sufficient statistics array (N, ...).
    """

    states: np.ndarray
    log_weights: np.ndarray
    streams: list
    step_index: int = 0
    gauss: object = None
    stats: object = None

    @property
    def n(self):
        return self.states.shape[0]

    @property
    def weights(self):
        return np.exp(self.log_weights)

    def particle(self, i):
        g = None if self.gauss is None else (self.gauss.mean[i], self.gauss.cov[i])
        s = None if self.stats is None else self.stats[i]
        return Particle(self.states[i], float(self.log_weights[i]), g, s)

    def take(self, idx):
        """Sub-population view for chunked execution (idx slice or array)."""
        if isinstance(idx, slice):
            streams = self.streams[idx]
        else:
            streams = [self.streams[i] for i in np.asarray(idx)]
        gauss = None if self.gauss is None \
            else type(self.gauss)(self.gauss.mean[idx], self.gauss.cov[idx])
        stats = None if self.stats is None else self.stats[idx]
        return ParticleSet(self.states[idx], self.log_weights[idx], streams,
                           self.step_index, gauss, stats)


@dataclass
class MeasurementModel:
    """Discrete-time measurement density.

    Attributes:
        log_likelihood: callable (y, states) -> log p(y | x) with states
            batched (N, n), returning (N,).
    """

    log_likelihood: object


def gaussian_measurement(h, var):
    """Scalar Gaussian measurement y = h . x + noise, noise ~ N(0, var).

    Args:
        h: state index (int) or weight vector over state dimensions.
        var: measurement noise variance.

    Returns:
        MeasurementModel.
    """
    var = float(var)
    if var <= 0:
        raise ValueError("measurement variance must be positive")
    const = -0.5 * np.log(2.0 * np.pi * var)

    def loglik(y, states):
        if isinstance(h, (int, np.integer)):
            pred = states[..., h]
        else:
            pred = states @ np.asarray(h, dtype=float)
        r = np.asarray(y, dtype=float) - pred
        return const - 0.5 * r * r / var

    return MeasurementModel(log_likelihood=loglik)


@dataclass
class StepStats:
    """Diagnostics from one measurement update."""

    t: float
    ess: float
    resampled: bool
    log_ml_increment: float


def seed_streams(seed, n_particles):
    """Independent generators for particle slots plus helpers.

    Args:
        seed: master seed (int or SeedSequence entropy).
        n_particles: number of particle slots.

    Returns:
        (streams, resample_rng, summary_rng): per-slot generators, the
        generator used for resampling draws, and a generator for summary
        sampling (e.g. posterior quantiles).
    """
    children = np.random.SeedSequence(seed).spawn(n_particles + 2)
    streams = [np.random.default_rng(c) for c in children[:n_particles]]
    return streams, np.random.default_rng(children[n_particles]), \
        np.random.default_rng(children[n_particles + 1])


def init_particle_set(sampler, streams, *, gauss=None, stats=None):
    """Draw an equally weighted initial population.

    Args:
        sampler: callable rng -> one state draw (n,).
        streams: per-slot generators (one draw is taken from each).
        gauss: optional initial Gaussian block payload.
        stats: optional initial sufficient statistics (N, ...).

    Returns:
        ParticleSet with uniform weights.
    """
    states = np.stack([np.asarray(sampler(g), dtype=float) for g in streams])
    if states.ndim == 1:
        states = states[:, None]
    if not np.all(np.isfinite(states)):
        raise IntegrationError("initial sampler produced non-finite states")
    n = states.shape[0]
    lw = np.full(n, -np.log(n))
    return ParticleSet(states, lw, list(streams), 0, gauss, stats)


def draw_increments(grid, diffusion, streams):
    """Per-slot Brownian increments for one interval, one stream each."""
    dim = diffusion.dim
    if dim is None:
        dim = diffusion.at(grid.t0).shape[0]
    noise = np.stack([g.standard_normal((grid.n_steps, dim)) for g in streams])
    return BrownianIncrements.from_noise(grid, diffusion, noise)


def normalize_log_weights(log_weights):
    """Normalize log weights into probabilities.

    Args:
        log_weights: unnormalized log weights (N,); -inf entries allowed.

    Returns:
        (weights, log_mean): normalized weights summing to one, and
        log(mean(exp(log_weights))), the marginal-likelihood increment
        when the inputs are incremental weights of equally weighted
        particles.

    Raises:
        DegeneracyError: if every entry is -inf.
        IntegrationError: if any entry is NaN or +inf.
    """
    lw = np.asarray(log_weights, dtype=float)
    if np.any(np.isnan(lw)) or np.any(lw == np.inf):
        raise IntegrationError("log weights contain NaN or +inf")
    lse = _logsumexp(lw)
    if lse == -np.inf:
        raise DegeneracyError("all particle weights vanished")
    return np.exp(lw - lse), lse - np.log(lw.size)


def effective_sample_size(weights):
    """ESS = 1 / sum(w^2) of normalized weights.

    Raises:
        ValueError: if the weights do not sum to one (unnormalized input).
    """
    w = np.asarray(weights, dtype=float)
    if abs(w.sum() - 1.0) > 1e-8 or np.any(w < 0):
        raise ValueError("effective_sample_size expects normalized weights")
    return float(1.0 / np.sum(w * w))


def systematic_resample_indices(weights, rng):
    """Systematic resampling: one uniform, N evenly spaced positions.

    Args:
        weights: normalized weights (N,).
        rng: numpy Generator used for the single uniform draw.

    Returns:
        Ancestor indices (N,) int array; offspring counts of index i are
        floor(N w_i) or ceil(N w_i).
    """
    w = np.asarray(weights, dtype=float)
    n = w.size
    positions = (rng.random() + np.arange(n)) / n
    cum = np.cumsum(w)
    cum[-1] = max(cum[-1], 1.0)
    return np.minimum(np.searchsorted(cum, positions), n - 1)


def systematic_resample(pset, rng):
    """Resample a particle set back to uniform weights.

    States and per-particle payloads are reordered by ancestry; streams
    stay bound to their slots so subsequent draws do not depend on the
    resampling outcome.

    Args:
        pset: ParticleSet with normalized log weights.
        rng: numpy Generator for the resampling draw.

    Returns:
        New ParticleSet with weights 1/N.
    """
    idx = systematic_resample_indices(np.exp(pset.log_weights), rng)
    gauss = None if pset.gauss is None \
        else type(pset.gauss)(pset.gauss.mean[idx], pset.gauss.cov[idx])
    stats = None if pset.stats is None else pset.stats[idx]
    lw = np.full(pset.n, -np.log(pset.n))
    return ParticleSet(pset.states[idx], lw, pset.streams, pset.step_index,
                       gauss, stats)


def finish_step(pset, new_states, llr, loglik, t, *, gauss=None, stats=None,
                ess_threshold=0.5, resample_rng=None):
    """Shared tail of every filter step: weight, normalize, resample.

    Args:
        pset: particle set before the step (normalized log weights).
        new_states: propagated states (N, n).
        llr: log likelihood ratios from propagation (N,).
        loglik: measurement log likelihoods (N,).
        t: measurement time (for diagnostics).
        gauss, stats: payloads carried into the new set.
        ess_threshold: resample when ESS < threshold * N.
        resample_rng: generator used if resampling triggers.

    Returns:
        (ParticleSet, StepStats).
    """
    k = pset.step_index + 1
    lw_un = pset.log_weights + llr + loglik
    if np.any(np.isnan(lw_un)) or np.any(lw_un == np.inf):
        raise IntegrationError("non-finite log weights at step %d" % k)
    log_ml_inc = _logsumexp(lw_un)
    if log_ml_inc == -np.inf:
        raise DegeneracyError("all particle weights vanished at step %d" % k)
    lw = lw_un - log_ml_inc
    w = np.exp(lw)
    ess = float(1.0 / np.sum(w * w))
    out = ParticleSet(new_states, lw, pset.streams, k, gauss, stats)
    resampled = ess < ess_threshold * pset.n
    if resampled:
        if resample_rng is None:
            raise ValueError("resampling triggered but no resample_rng given")
        out = systematic_resample(out, resample_rng)
    return out, StepStats(t=t, ess=ess, resampled=resampled,
                          log_ml_increment=log_ml_inc)


def sir_step(pset, model, imp, meas_model, y, grid, *, ess_threshold=0.5,
             resample_rng=None):
    """One measurement cycle of the sequential importance resampling filter.

    Propagates every particle under the importance SDE over the interval,
    multiplies weights by exp(Lambda) and the measurement likelihood,
    normalizes, and resamples if the effective sample size drops below
    ess_threshold * N.

    Args:
        pset: current ParticleSet (states (N, n)).
        model: SdeModel.
        imp: ImportanceSpec for this interval.
        meas_model: MeasurementModel for y.
        y: measurement value at grid.t1.
        grid: TimeGrid from the previous measurement time to this one.

    Returns:
        (ParticleSet, StepStats).
    """
    incs = draw_increments(grid, model.diffusion, pset.streams)
    res = propagate_coupled(model, imp, pset.states, grid, incs)
    loglik = np.asarray(meas_model.log_likelihood(y, res.state), dtype=float)
    return finish_step(pset, res.state, res.llr, loglik, grid.t1,
                       ess_threshold=ess_threshold, resample_rng=resample_rng)


def sir_split_step(pset, model, imp, meas_model, y, grid, *,
                   ess_threshold=0.5, resample_rng=None):
    """sir_step for split models; pset.states holds (x1, x2) concatenated."""
    x1, x2 = model.split(pset.states)
    incs = draw_increments(grid, model.diffusion, pset.streams)
    res = propagate_coupled_split(model, imp, x1, x2, grid, incs)
    states = np.concatenate([res.state_det, res.state_stoch], axis=-1)
    loglik = np.asarray(meas_model.log_likelihood(y, states), dtype=float)
    return finish_step(pset, states, res.llr, loglik, grid.t1,
                       ess_threshold=ess_threshold, resample_rng=resample_rng)


@dataclass
class FilterConfig:
    """Run-level settings for run_filter.

    Attributes:
        n_particles: particle count N.
        n_steps: Euler steps per measurement interval.
        ess_threshold: resampling trigger as a fraction of N.
        seed: master seed; all randomness derives from it.
        threads: worker threads for the propagation phase.  Results are
            identical for any thread count.
        t0: time of the initial state (first interval is [t0, times[0]]).
        theta_samples: per-particle draws used for posterior parameter
            quantile summaries in the conjugate filter.
    """

    n_particles: int
    n_steps: int = 10
    ess_threshold: float = 0.5
    seed: int = 0
    threads: int = 1
    t0: float = 0.0
    theta_samples: int = 64


@dataclass
class SummaryRow:
    """Per-step filter summary (weighted moments and diagnostics)."""

    k: int
    t: float
    mean: np.ndarray
    var: np.ndarray
    ess: float
    log_marginal: float
    resampled: bool
    extra: dict = field(default_factory=dict)


@dataclass
class FilterResult:
    summaries: list
    final_set: ParticleSet
    log_marginal: float


def _chunk_map(pset, threads, phase):
    """Run a propagation phase over contiguous particle chunks.

    phase maps a sub-ParticleSet to a tuple of arrays (leading axis is
    the particle axis); outputs are concatenated in slot order, so the
    result does not depend on the number of threads.
    """
    n = pset.n
    if threads <= 1 or n < 2 * threads:
        return phase(pset)
    bounds = np.linspace(0, n, threads + 1).astype(int)
    chunks = [pset.take(slice(a, b)) for a, b in zip(bounds[:-1], bounds[1:])
              if b > a]
    with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as ex:
        parts = list(ex.map(phase, chunks))
    return tuple(np.concatenate(cols, axis=0) for cols in zip(*parts))


def _weighted_mean_var(states, w):
    mean = w @ states
    var = w @ (states - mean) ** 2
    return mean, var


def _weighted_quantiles(values, weights, qs):
    order = np.argsort(values)
    v = values[order]
    cw = np.cumsum(weights[order])
    cw = cw / cw[-1]
    return np.interp(qs, cw, v)


def run_filter(model, proposal, meas_model, times, ys, config, *,
               method="sir", family=None, cond_fn=None, init_sampler=None,
               init_gauss=None, step_callback=None):
    """Run a complete filter over a measurement sequence.

    Args:
        model: SdeModel (method "sir"), SplitSdeModel ("sir_split",
            "rb_param") or CondGaussModel ("rb_gauss").
        proposal: ImportanceSpec used for every interval, or a builder
            callable (pset, grid, y) -> ImportanceSpec evaluated per
            interval (and per chunk when threads > 1).
        meas_model: MeasurementModel; ignored for "rb_gauss" (the model
            carries H and R) and "rb_param" (the family marginal is the
            likelihood).
        times: measurement times, strictly increasing, all > config.t0.
        ys: measurements aligned with times.
        config: FilterConfig.
        method: "sir", "sir_split", "rb_gauss" or "rb_param".
        family: ConjugateFamily for "rb_param".
        cond_fn: for "rb_param", maps (x_prev, x_new) to the value the
            family conditions on; defaults to the new state's first
            component.
        init_sampler: overrides the model's initial sampler.
        init_gauss: (m0, P0) for "rb_gauss" (defaults to model.init_gauss).
        step_callback: optional callable (k, t, pset, stats) run after
            each measurement update.

    Returns:
        FilterResult; summaries[0] describes the initial population.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1:
        raise ValueError("times must be 1-d")
    if times.size and (times[0] <= config.t0 or np.any(np.diff(times) <= 0)):
        raise ValueError("measurement times must be strictly increasing "
                         "and start after t0")
    ys = np.asarray(ys)
    if ys.shape[:1] != times.shape:
        raise ValueError("ys must align with times")

    builder = proposal if callable(proposal) else (lambda pset, grid, y: proposal)
    streams, resample_rng, summary_rng = seed_streams(config.seed,
                                                      config.n_particles)

    if method == "rb_gauss":
        from . import raoblackwell as rb
        pset = rb.init_rb_gauss_set(model, streams, init_sampler=init_sampler,
                                    init_gauss=init_gauss)
    elif method == "rb_param":
        if family is None:
            raise ValueError("rb_param needs a conjugate family")
        sampler = init_sampler or model.initial_sampler
        if sampler is None:
            raise ValueError("no initial sampler available")
        pset = init_particle_set(sampler, streams,
                                 stats=family.init_stats(config.n_particles))
        if cond_fn is None:
            cond_fn = lambda x_prev, x_new: x_new[..., 0]
    else:
        sampler = init_sampler or model.initial_sampler
        if sampler is None:
            raise ValueError("no initial sampler available")
        pset = init_particle_set(sampler, streams)

    def summarize(pset, k, t, ess, log_ml, resampled):
        w = pset.weights
        extra = {}
        if method == "rb_gauss":
            mean_b = w @ pset.gauss.mean
            diag = np.diagonal(pset.gauss.cov, axis1=-2, axis2=-1)
            var_b = w @ (diag + (pset.gauss.mean - mean_b) ** 2)
            mean_s, var_s = _weighted_mean_var(pset.states, w)
            mean = np.concatenate([mean_b, mean_s])
            var = np.concatenate([var_b, var_s])
        else:
            mean, var = _weighted_mean_var(pset.states, w)
        if method == "rb_param":
            est = family.mean(pset.stats)
            extra["theta_mean"] = float(w @ est) if np.all(np.isfinite(est)) \
                else float("nan")
            draws = family.sample(pset.stats, summary_rng, config.theta_samples)
            wrep = np.repeat(w / config.theta_samples, config.theta_samples)
            qs = _weighted_quantiles(draws.ravel(), wrep, (0.05, 0.5, 0.95))
            extra["theta_q05"], extra["theta_q50"], extra["theta_q95"] = map(float, qs)
        return SummaryRow(k=k, t=t, mean=mean, var=var, ess=ess,
                          log_marginal=log_ml, resampled=resampled, extra=extra)

    summaries = [summarize(pset, 0, config.t0, float(pset.n), 0.0, False)]
    log_ml = 0.0
    t_prev = config.t0

    for k, (t_k, y_k) in enumerate(zip(times, ys), start=1):
        grid = TimeGrid(t_prev, float(t_k), config.n_steps)

        if method == "sir":
            def phase(chunk):
                imp = builder(chunk, grid, y_k)
                incs = draw_increments(grid, model.diffusion, chunk.streams)
                res = propagate_coupled(model, imp, chunk.states, grid, incs)
                return res.state, res.llr

            states, llr = _chunk_map(pset, config.threads, phase)
            loglik = np.asarray(meas_model.log_likelihood(y_k, states), dtype=float)
            pset, st = finish_step(pset, states, llr, loglik, grid.t1,
                                   ess_threshold=config.ess_threshold,
                                   resample_rng=resample_rng)
        elif method == "sir_split":
            def phase(chunk):
                imp = builder(chunk, grid, y_k)
                x1, x2 = model.split(chunk.states)
                incs = draw_increments(grid, model.diffusion, chunk.streams)
                res = propagate_coupled_split(model, imp, x1, x2, grid, incs)
                return np.concatenate([res.state_det, res.state_stoch], -1), res.llr

            states, llr = _chunk_map(pset, config.threads, phase)
            loglik = np.asarray(meas_model.log_likelihood(y_k, states), dtype=float)
            pset, st = finish_step(pset, states, llr, loglik, grid.t1,
                                   ess_threshold=config.ess_threshold,
                                   resample_rng=resample_rng)
        elif method == "rb_gauss":
            from . import raoblackwell as rb
            pset, st = rb.rb_gauss_step(pset, model, None, y_k, grid,
                                        builder=builder,
                                        ess_threshold=config.ess_threshold,
                                        resample_rng=resample_rng,
                                        threads=config.threads)
        elif method == "rb_param":
            from . import raoblackwell as rb
            pset, st = rb.rb_param_step(pset, model, None, family, y_k, grid,
                                        cond_fn=cond_fn, builder=builder,
                                        ess_threshold=config.ess_threshold,
                                        resample_rng=resample_rng,
                                        threads=config.threads)
        else:
            raise ValueError("unknown method %r" % (method,))

        log_ml += st.log_ml_increment
        summaries.append(summarize(pset, k, float(t_k), st.ess, log_ml,
                                   st.resampled))
        if step_callback is not None:
            step_callback(k, float(t_k), pset, st)
        t_prev = float(t_k)

    return FilterResult(summaries=summaries, final_set=pset, log_marginal=log_ml)
