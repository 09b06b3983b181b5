"""Command line harness: simulate, filter, kl, selftest.

Configuration is an INI file with sections [model], [filter], [simulate],
[prior], [kl] and [io]; every key has a default, and --seed, --particles,
--out and --threads override the file.  Numeric output is written as CSV
with 17 significant digits and LF line endings, with the resolved
configuration echoed into '#' header lines, so identical runs produce
byte-identical files.

Exit codes: 0 success, 2 configuration or input-format error, 3 numerical
failure during a run, 4 output I/O error.
"""

import argparse
import configparser
import math
import os
import sys

import numpy as np

from . import models
from .exceptions import (ConfigError, DegeneracyError, DiffusionError,
                         IntegrationError, SingularMatrixError)
from .filtering import (FilterConfig, gaussian_measurement, run_filter,
                        systematic_resample_indices)
from .girsanov import (ImportanceSpec, estimate_kl, prior_proposal,
                       propagate_coupled, propagate_coupled_split)
from .proposals import EkfMoments, build_bridge, ekf_condition, ekf_predict
from .raoblackwell import (CondGaussModel, gamma_poisson_family,
                           invchi2_family)
from .sde import SdeModel, TimeGrid, integrate_sde, sample_brownian_increments

_MODEL_KINDS = ("ou", "pendulum", "epidemic", "lineargauss")

_MODEL_DEFAULTS = {
    "ou": {"rate": 1.0, "q": 0.8, "obs_var": 0.25, "x0_mean": 0.0,
           "x0_var": 1.0},
    "pendulum": {"a": 1.0, "q": 0.01, "obs_var": 0.25, "x1_0": 1.5,
                 "x2_0": 0.0, "init_var": 0.25},
    "epidemic": {"g": 1.0, "q": 0.001, "n_true": 100000.0,
                 "sigma_true": 1.6, "beta_a": 1.0, "beta_b": 100.0,
                 "lam0_mean": math.log(5.0), "lam0_var": 4.0},
    "lineargauss": {"lin_rate": -0.5, "couple": 1.0, "q_eta": 0.3,
                    "ou_rate": 1.0, "q_beta": 0.4, "obs_var": 0.1,
                    "m0": 0.0, "p0": 1.0, "x2_0": 0.0, "x3_0": 0.0,
                    "x3_var": 0.5},
}

_SIM_DEFAULTS = {
    "ou": {"n_meas": 50, "dt": 0.5, "n_fine": 50},
    "pendulum": {"n_meas": 100, "dt": 0.1, "n_fine": 100},
    "epidemic": {"n_meas": 30, "dt": 1.0, "n_fine": 100},
    "lineargauss": {"n_meas": 40, "dt": 0.5, "n_fine": 50},
}

_FILTER_DEFAULTS = {"method": "", "particles": 1000, "steps_per_interval": 10,
                    "ess_threshold": 0.5, "proposal": "", "dump_steps": ""}

_PRIOR_DEFAULTS = {"nu0": 2.0, "s20": 0.2, "alpha0": 10.0, "beta0": 0.001}

_KL_DEFAULTS = {"kind": "const", "a": 1.0, "b": 0.0, "sigma2": 1.0,
                "rate": 1.0, "horizon": 1.0, "steps": 100, "paths": 1000,
                "x0": 0.0}

_METHOD_DEFAULT = {"ou": "cd_sir", "pendulum": "cdrb_param",
                   "epidemic": "cdrb_param", "lineargauss": "cdrb_gauss"}
_ALLOWED_METHODS = {"ou": ("cd_sir",),
                    "pendulum": ("cd_sir_singular", "cdrb_param"),
                    "epidemic": ("cdrb_param",),
                    "lineargauss": ("cdrb_gauss",)}
_PROPOSAL_DEFAULT = {"ou": "prior", "pendulum": "bridge",
                     "epidemic": "bridge", "lineargauss": "prior"}

_METHOD_TO_INTERNAL = {"cd_sir": "sir", "cd_sir_singular": "sir_split",
                       "cdrb_gauss": "rb_gauss", "cdrb_param": "rb_param"}


# ---------------------------------------------------------------------------
# configuration plumbing


def _coerce(section, key, raw, like):
    try:
        if isinstance(like, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(like, int) and not isinstance(like, bool):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        return raw.strip()
    except (TypeError, ValueError):
        raise ConfigError("[%s] %s must be %s, got %r"
                          % (section, key, type(like).__name__, raw))


def load_config(path, overrides):
    """Read an INI config into a dict of resolved sections.

    Args:
        path: config file path or None (all defaults).
        overrides: dict with optional seed/particles/out/threads from the
            command line.

    Returns:
        Dict with keys model, filter, simulate, prior, kl, io, seed,
        threads; every value fully defaulted and type checked.

    Raises:
        ConfigError: unknown sections/keys/kinds or unparseable values.
    """
    parser = configparser.ConfigParser()
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError("config file not found: %s" % path)
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError("cannot parse config %s: %s" % (path, exc))

    known = {"model", "filter", "simulate", "prior", "kl", "io"}
    for sec in parser.sections():
        if sec not in known:
            raise ConfigError("unknown config section [%s]" % sec)

    raw_model = dict(parser["model"]) if parser.has_section("model") else {}
    kind = raw_model.pop("kind", "pendulum").strip()
    if kind not in _MODEL_KINDS:
        raise ConfigError("[model] kind must be one of %s, got %r"
                          % ("/".join(_MODEL_KINDS), kind))

    def resolve(section_name, raw, defaults):
        out = dict(defaults)
        for key, raw_val in raw.items():
            if key not in defaults:
                raise ConfigError("unknown key [%s] %s" % (section_name, key))
            out[key] = _coerce(section_name, key, raw_val, defaults[key])
        return out

    model = resolve("model", raw_model, _MODEL_DEFAULTS[kind])
    model["kind"] = kind
    filt = resolve("filter", dict(parser["filter"]) if parser.has_section("filter") else {},
                   _FILTER_DEFAULTS)
    sim = resolve("simulate", dict(parser["simulate"]) if parser.has_section("simulate") else {},
                  _SIM_DEFAULTS[kind])
    prior = resolve("prior", dict(parser["prior"]) if parser.has_section("prior") else {},
                    _PRIOR_DEFAULTS)
    kl = resolve("kl", dict(parser["kl"]) if parser.has_section("kl") else {},
                 _KL_DEFAULTS)
    io_raw = dict(parser["io"]) if parser.has_section("io") else {}
    io = {"out": io_raw.pop("out", "."),
          "measurements": io_raw.pop("measurements", ""),
          "seed": _coerce("io", "seed", io_raw.pop("seed", "0"), 0),
          "threads": _coerce("io", "threads", io_raw.pop("threads", "1"), 0)}
    if io_raw:
        raise ConfigError("unknown key [io] %s" % sorted(io_raw)[0])

    if overrides.get("seed") is not None:
        io["seed"] = overrides["seed"]
    if overrides.get("threads") is not None:
        io["threads"] = overrides["threads"]
    if overrides.get("out") is not None:
        io["out"] = overrides["out"]
    if overrides.get("particles") is not None:
        filt["particles"] = overrides["particles"]

    if not filt["method"]:
        filt["method"] = _METHOD_DEFAULT[kind]
    if filt["method"] not in _ALLOWED_METHODS[kind]:
        raise ConfigError("[filter] method %r not supported for model %r "
                          "(allowed: %s)" % (filt["method"], kind,
                                             ", ".join(_ALLOWED_METHODS[kind])))
    if not filt["proposal"]:
        filt["proposal"] = _PROPOSAL_DEFAULT[kind]
    if filt["proposal"] not in ("prior", "bridge"):
        raise ConfigError("[filter] proposal must be prior or bridge, got %r"
                          % filt["proposal"])

    for key in ("particles", "steps_per_interval"):
        if filt[key] < 1:
            raise ConfigError("[filter] %s must be >= 1, got %d"
                              % (key, filt[key]))
    if not (0.0 <= filt["ess_threshold"] <= 1.0):
        raise ConfigError("[filter] ess_threshold must be in [0, 1]")
    if io["threads"] < 1:
        raise ConfigError("[io] threads must be >= 1")
    if sim["n_meas"] < 1 or sim["dt"] <= 0 or sim["n_fine"] < 1:
        raise ConfigError("[simulate] needs n_meas >= 1, dt > 0, n_fine >= 1")
    for key in ("nu0", "s20", "alpha0", "beta0"):
        if prior[key] <= 0:
            raise ConfigError("[prior] %s must be positive" % key)
    if kl["kind"] not in ("const", "linear"):
        raise ConfigError("[kl] kind must be const or linear, got %r"
                          % kl["kind"])
    if kl["steps"] < 1 or kl["paths"] < 1 or kl["sigma2"] <= 0 \
            or kl["horizon"] <= 0:
        raise ConfigError("[kl] needs steps/paths >= 1, sigma2 > 0, horizon > 0")

    dump = []
    if filt["dump_steps"].strip():
        for tok in filt["dump_steps"].split(","):
            try:
                dump.append(int(tok))
            except ValueError:
                raise ConfigError("[filter] dump_steps must be comma-separated "
                                  "integers, got %r" % tok)
    filt["dump_steps"] = dump

    return {"model": model, "filter": filt, "simulate": sim, "prior": prior,
            "kl": kl, "io": io, "seed": io["seed"], "threads": io["threads"]}


def _provenance(cfg, command):
    """Header lines echoing the resolved configuration (not I/O paths)."""
    lines = ["# sdepf %s" % command, "# seed = %d" % cfg["seed"]]
    for sec in ("model", "filter", "simulate", "prior", "kl"):
        if sec == "prior" and cfg["model"]["kind"] not in ("pendulum", "epidemic"):
            continue
        if sec == "kl" and command != "kl":
            continue
        if sec in ("simulate",) and command not in ("simulate",):
            continue
        for key in sorted(cfg[sec]):
            val = cfg[sec][key]
            if isinstance(val, float):
                val = "%.17g" % val
            elif isinstance(val, list):
                val = ",".join(str(v) for v in val)
            lines.append("# %s.%s = %s" % (sec, key, val))
    return lines


def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return "%d" % value
    return "%.17g" % value


def _write_csv(path, header_lines, columns, rows):
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for line in header_lines:
                fh.write(line + "\n")
            fh.write(",".join(columns) + "\n")
            for row in rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")
    except OSError:
        raise
    return path


def read_measurement_series(path):
    """Read a 't,y' CSV (comment lines allowed), validated."""
    times, ys = [], []
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError:
        raise ConfigError("measurement file not found: %s" % path)
    with fh:
        header = None
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if header is None:
                header = line
                if [c.strip().lower() for c in line.split(",")][0] != "t":
                    raise ConfigError("expected header starting with 't' in %s"
                                      % path)
                continue
            parts = line.split(",")
            if len(parts) < 2:
                raise ConfigError("malformed measurement row %r in %s"
                                  % (line, path))
            try:
                times.append(float(parts[0]))
                ys.append(float(parts[1]))
            except ValueError:
                raise ConfigError("non-numeric measurement row %r in %s"
                                  % (line, path))
    t = np.asarray(times)
    y = np.asarray(ys)
    if t.size == 0:
        raise ConfigError("no measurement rows in %s" % path)
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(y))):
        raise ConfigError("non-finite measurement values in %s" % path)
    if np.any(np.diff(t) <= 0):
        raise ConfigError("measurement times must be strictly increasing in %s"
                          % path)
    return t, y


# ---------------------------------------------------------------------------
# model construction helpers


def _linear_bridge_builder(rate, q, obs_var):
    """Bridge builder for the scalar OU model (measurement of the state)."""

    def drift(x, t):
        return -rate * x

    def jac(x, t):
        out = np.empty(x.shape[:-1] + (1, 1))
        out[...] = -rate
        return out

    q_mat = np.array([[float(q)]])
    h_row = np.array([1.0])

    def builder(pset, grid, y):
        mom = ekf_predict(EkfMoments.from_states(pset.states), drift, jac,
                          q_mat, grid)
        mom = ekf_condition(mom, h_row, float(obs_var), y)
        return build_bridge(pset.states, mom, grid.span, q, 0)

    return builder


def _build_ou(cfg):
    p = cfg["model"]
    rate, q = p["rate"], p["q"]
    if q <= 0 or p["obs_var"] <= 0 or p["x0_var"] <= 0:
        raise ConfigError("[model] q, obs_var and x0_var must be positive")
    sd0 = math.sqrt(p["x0_var"])

    def sampler(rng):
        return np.array([p["x0_mean"] + sd0 * rng.standard_normal()])

    model = SdeModel(dim_state=1, dim_noise=1,
                     drift=lambda x, t: -rate * x,
                     dispersion=1.0, diffusion=q, initial_sampler=sampler)
    meas = gaussian_measurement(0, p["obs_var"])
    if cfg["filter"]["proposal"] == "bridge":
        proposal = _linear_bridge_builder(rate, q, p["obs_var"])
    else:
        proposal = prior_proposal(model)
    return {"model": model, "meas": meas, "proposal": proposal,
            "method": "sir", "family": None, "cond_fn": None}


def _build_pendulum(cfg):
    p = cfg["model"]
    if p["q"] <= 0 or p["obs_var"] <= 0 or p["init_var"] <= 0:
        raise ConfigError("[model] q, obs_var and init_var must be positive")
    sd0 = math.sqrt(p["init_var"])
    mean0 = np.array([p["x1_0"], p["x2_0"]])

    def sampler(rng):
        return mean0 + sd0 * rng.standard_normal(2)

    model = models.pendulum_model(p["a"], p["q"], initial_sampler=sampler)
    method = cfg["filter"]["method"]
    if method == "cd_sir_singular":
        meas = gaussian_measurement(0, p["obs_var"])
        family = None
        cond_fn = None
        obs_var = p["obs_var"]
        internal = "sir_split"
    else:
        meas = None
        family = invchi2_family(cfg["prior"]["nu0"], cfg["prior"]["s20"])
        cond_fn = lambda x_prev, x_new: x_new[..., 0]
        obs_var = lambda pset: family.point_estimate(pset.stats)
        internal = "rb_param"
    if cfg["filter"]["proposal"] == "bridge":
        proposal = models.pendulum_bridge_builder(p["a"], p["q"], obs_var)
    else:
        proposal = prior_proposal(model)
    return {"model": model, "meas": meas, "proposal": proposal,
            "method": internal, "family": family, "cond_fn": cond_fn}


def _build_epidemic(cfg):
    p = cfg["model"]
    if p["q"] <= 0 or p["beta_a"] <= 0 or p["beta_b"] <= 0 or p["lam0_var"] <= 0:
        raise ConfigError("[model] q, beta_a, beta_b and lam0_var must be positive")
    sampler = models.epidemic_init_sampler(p["beta_a"], p["beta_b"],
                                           p["lam0_mean"], p["lam0_var"])
    model = models.epidemic_model(p["g"], p["q"], initial_sampler=sampler)
    family = gamma_poisson_family(cfg["prior"]["alpha0"], cfg["prior"]["beta0"])
    cond_fn = models.epidemic_theta
    if cfg["filter"]["proposal"] == "bridge":
        proposal = models.epidemic_bridge_builder(p["g"], p["q"], family)
    else:
        proposal = prior_proposal(model)
    return {"model": model, "meas": None, "proposal": proposal,
            "method": "rb_param", "family": family, "cond_fn": cond_fn}


def _lineargauss_cond_model(p, sampler):
    lin_rate, couple = p["lin_rate"], p["couple"]

    def lin_coeff(x2, x3, t):
        out = np.empty(x3.shape[:-1] + (1, 1))
        out[...] = lin_rate
        return out

    def lin_noise(x2, x3, t):
        out = np.empty(x3.shape[:-1] + (1, 1))
        out[...] = 1.0
        return out

    return CondGaussModel(
        dim_lin=1, dim_det=1, dim_stoch=1,
        lin_coeff=lin_coeff,
        lin_shift=lambda x2, x3, t: couple * x3,
        lin_noise=lin_noise,
        lin_diffusion=p["q_eta"],
        drift_det=lambda x2, x3, t: x3,
        drift_stoch=lambda x2, x3, t: -p["ou_rate"] * x3,
        dispersion=1.0, diffusion=p["q_beta"],
        meas_matrix=np.array([[1.0]]), meas_cov=np.array([[p["obs_var"]]]),
        initial_sampler=sampler,
        init_gauss=(np.array([p["m0"]]), np.array([[p["p0"]]])))


def _build_lineargauss(cfg):
    p = cfg["model"]
    for key in ("q_eta", "q_beta", "obs_var", "p0", "x3_var"):
        if p[key] <= 0:
            raise ConfigError("[model] %s must be positive" % key)
    sd3 = math.sqrt(p["x3_var"])

    def sampler(rng):
        return np.array([p["x2_0"], p["x3_0"] + sd3 * rng.standard_normal()])

    model = _lineargauss_cond_model(p, sampler)
    return {"model": model, "meas": None, "proposal": prior_proposal(model),
            "method": "rb_gauss", "family": None, "cond_fn": None}


_BUILDERS = {"ou": _build_ou, "pendulum": _build_pendulum,
             "epidemic": _build_epidemic, "lineargauss": _build_lineargauss}


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg):
    """Simulate a truth path and measurements, write truth + measurement CSVs."""
    kind = cfg["model"]["kind"]
    p = cfg["model"]
    sim = cfg["simulate"]
    seed = cfg["seed"]
    out = cfg["io"]["out"]
    header = _provenance(cfg, "simulate")

    if kind == "pendulum":
        res = models.pendulum_simulate(p["a"], p["q"],
                                       np.array([p["x1_0"], p["x2_0"]]),
                                       sim["dt"], sim["n_meas"], p["obs_var"],
                                       seed, n_fine=sim["n_fine"])
        truth_rows = [(t,) + tuple(s) for t, s in zip(res.times, res.states)]
        truth_cols = ["t", "x1", "x2"]
        meas_rows = list(zip(res.times, res.ys))
        meas_cols = ["t", "y"]
    elif kind == "epidemic":
        lam0 = p["lam0_mean"] if p["sigma_true"] <= 0 \
            else math.log(p["sigma_true"])
        y0_rng = np.random.default_rng(np.random.SeedSequence((seed, 1)))
        y0 = y0_rng.beta(p["beta_a"], p["beta_b"])
        res = models.epidemic_simulate(p["g"], 0.0, p["n_true"], y0, lam0,
                                       sim["n_meas"], seed, dt_meas=sim["dt"],
                                       n_fine=sim["n_fine"])
        truth_rows = [(t,) + tuple(s) for t, s in zip(res.times, res.states)]
        truth_cols = ["t", "x", "y", "lam"]
        meas_rows = list(zip(res.times, res.counts))
        meas_cols = ["week", "deaths"]
    elif kind == "ou":
        path_ss, meas_ss = np.random.SeedSequence(seed).spawn(2)
        model = SdeModel(dim_state=1, dim_noise=1,
                         drift=lambda x, t: -p["rate"] * x,
                         dispersion=1.0, diffusion=p["q"])
        grid = TimeGrid(0.0, sim["n_meas"] * sim["dt"],
                        sim["n_meas"] * sim["n_fine"])
        rng = np.random.default_rng(path_ss)
        x0 = np.array([p["x0_mean"]
                       + math.sqrt(p["x0_var"]) * rng.standard_normal()])
        incs = sample_brownian_increments(grid, model.diffusion, rng)
        path = integrate_sde(model, x0, grid, incs)
        idx = np.arange(1, sim["n_meas"] + 1) * sim["n_fine"]
        times = grid.times[idx]
        states = path[idx, 0]
        ys = states + math.sqrt(p["obs_var"]) * \
            np.random.default_rng(meas_ss).standard_normal(sim["n_meas"])
        truth_rows = list(zip(times, states))
        truth_cols = ["t", "x"]
        meas_rows = list(zip(times, ys))
        meas_cols = ["t", "y"]
    else:  # lineargauss
        path_ss, meas_ss = np.random.SeedSequence(seed).spawn(2)
        rng = np.random.default_rng(path_ss)

        def drift(x, t):
            return np.stack([p["lin_rate"] * x[..., 0] + p["couple"] * x[..., 2],
                             x[..., 2], -p["ou_rate"] * x[..., 2]], axis=-1)

        disp = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
        model = SdeModel(dim_state=3, dim_noise=2, drift=drift,
                         dispersion=disp,
                         diffusion=np.diag([p["q_eta"], p["q_beta"]]))
        grid = TimeGrid(0.0, sim["n_meas"] * sim["dt"],
                        sim["n_meas"] * sim["n_fine"])
        x0 = np.array([p["m0"] + math.sqrt(p["p0"]) * rng.standard_normal(),
                       p["x2_0"],
                       p["x3_0"] + math.sqrt(p["x3_var"]) * rng.standard_normal()])
        incs = sample_brownian_increments(grid, model.diffusion, rng)
        path = integrate_sde(model, x0, grid, incs)
        idx = np.arange(1, sim["n_meas"] + 1) * sim["n_fine"]
        times = grid.times[idx]
        states = path[idx]
        ys = states[:, 0] + math.sqrt(p["obs_var"]) * \
            np.random.default_rng(meas_ss).standard_normal(sim["n_meas"])
        truth_rows = [(t,) + tuple(s) for t, s in zip(times, states)]
        truth_cols = ["t", "x1", "x2", "x3"]
        meas_rows = list(zip(times, ys))
        meas_cols = ["t", "y"]

    os.makedirs(out, exist_ok=True)
    truth_path = _write_csv(os.path.join(out, "truth.csv"), header,
                            truth_cols, truth_rows)
    meas_path = _write_csv(os.path.join(out, "measurements.csv"), header,
                           meas_cols, meas_rows)
    print("seed = %d" % seed)
    print("wrote %s" % truth_path)
    print("wrote %s" % meas_path)
    return 0


def cmd_filter(cfg):
    """Run a filter over a measurement file, write summary CSVs."""
    kind = cfg["model"]["kind"]
    meas_path = cfg["io"]["measurements"]
    if not meas_path:
        raise ConfigError("[io] measurements is required for the filter command")
    if kind == "epidemic":
        if not os.path.exists(meas_path):
            raise ConfigError("measurement file not found: %s" % meas_path)
        series = models.read_count_series(meas_path)
        times, ys = series.times, series.counts
    else:
        times, ys = read_measurement_series(meas_path)

    built = _BUILDERS[kind](cfg)
    filt = cfg["filter"]
    fc = FilterConfig(n_particles=filt["particles"],
                      n_steps=filt["steps_per_interval"],
                      ess_threshold=filt["ess_threshold"],
                      seed=cfg["seed"], threads=cfg["threads"])

    indicator = {}
    dumps = {}
    dump_steps = set(filt["dump_steps"])

    def callback(k, t, pset, st):
        if kind == "epidemic":
            indicator[k] = models.epidemic_indicator(pset.states, pset.weights)
        if k in dump_steps:
            dumps[k] = (pset.states.copy(), pset.log_weights.copy(),
                        None if pset.stats is None else pset.stats.copy())

    result = run_filter(built["model"], built["proposal"], built["meas"],
                        times, ys, fc, method=built["method"],
                        family=built["family"], cond_fn=built["cond_fn"],
                        step_callback=callback)

    out = cfg["io"]["out"]
    os.makedirs(out, exist_ok=True)
    header = _provenance(cfg, "filter")
    n_dim = result.summaries[0].mean.size
    cols = ["k", "t"] + ["mean_%d" % i for i in range(n_dim)] \
        + ["var_%d" % i for i in range(n_dim)] \
        + ["ess", "log_marginal", "resampled"]
    has_theta = built["method"] == "rb_param"
    if has_theta:
        cols += ["theta_mean", "theta_q05", "theta_q50", "theta_q95"]
    if kind == "epidemic":
        cols += ["indicator"]
    rows = []
    for s in result.summaries:
        row = [s.k, s.t] + list(s.mean) + list(s.var) \
            + [s.ess, s.log_marginal, s.resampled]
        if has_theta:
            row += [s.extra["theta_mean"], s.extra["theta_q05"],
                    s.extra["theta_q50"], s.extra["theta_q95"]]
        if kind == "epidemic":
            row += [indicator.get(s.k, float("nan"))]
        rows.append(row)
    summary_path = _write_csv(os.path.join(out, "summary.csv"), header, cols, rows)
    print("seed = %d" % cfg["seed"])
    print("wrote %s" % summary_path)

    if has_theta:
        prow = [[s.k, s.t, s.extra["theta_mean"], s.extra["theta_q05"],
                 s.extra["theta_q50"], s.extra["theta_q95"]]
                for s in result.summaries]
        params_path = _write_csv(os.path.join(out, "params.csv"), header,
                                 ["k", "t", "theta_mean", "theta_q05",
                                  "theta_q50", "theta_q95"], prow)
        print("wrote %s" % params_path)

    for k in sorted(dumps):
        states, lw, stats = dumps[k]
        cols = ["i"] + ["state_%d" % i for i in range(states.shape[1])] \
            + ["log_weight"]
        rows = [[i] + list(states[i]) + [lw[i]] for i in range(states.shape[0])]
        if stats is not None:
            cols += ["stat_%d" % i for i in range(stats.shape[1])]
            rows = [r + list(stats[i]) for i, r in enumerate(rows)]
        dump_path = _write_csv(os.path.join(out, "particles_%d.csv" % k),
                               header, cols, rows)
        print("wrote %s" % dump_path)
    return 0


def cmd_kl(cfg):
    """Estimate the drift-mismatch KL rate, write kl.csv."""
    p = cfg["kl"]
    seed = cfg["seed"]
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    grid = TimeGrid(0.0, p["horizon"], p["steps"])
    sigma = p["sigma2"]

    if p["kind"] == "const":
        a, b = p["a"], p["b"]
        drift_p = lambda x, t: np.full_like(x, a)
        drift_q = lambda x, t: np.full_like(x, b)
        closed = 0.5 * (a - b) ** 2 * p["horizon"] / sigma
    else:
        rate = p["rate"]
        drift_p = lambda x, t: -rate * x
        drift_q = lambda x, t: np.zeros_like(x)
        closed = float("nan")

    model_q = SdeModel(dim_state=1, dim_noise=1, drift=drift_q,
                       dispersion=math.sqrt(sigma), diffusion=1.0)
    x0 = np.full((p["paths"], 1), p["x0"])
    incs = sample_brownian_increments(grid, model_q.diffusion, rng,
                                      n_paths=p["paths"])
    paths = integrate_sde(model_q, x0, grid, incs)
    paths = np.moveaxis(paths, 0, 1)
    est = estimate_kl(drift_p, drift_q, sigma, paths, grid)

    out = cfg["io"]["out"]
    os.makedirs(out, exist_ok=True)
    path = _write_csv(os.path.join(out, "kl.csv"), _provenance(cfg, "kl"),
                      ["estimate", "closed_form", "paths", "steps"],
                      [[est, closed, p["paths"], p["steps"]]])
    print("seed = %d" % seed)
    print("kl_estimate = %.17g" % est)
    if math.isfinite(closed):
        print("kl_closed_form = %.17g" % closed)
    print("wrote %s" % path)
    return 0


def cmd_selftest(cfg):
    """Run a quick built-in oracle battery; exit 3 on any failure."""
    checks = []

    # Bootstrap proposal carries exactly unit weights.
    model = models.pendulum_model(1.0, 0.01)
    rng = np.random.default_rng(0)
    grid = TimeGrid(0.0, 0.1, 10)
    incs = sample_brownian_increments(grid, model.diffusion, rng, n_paths=64)
    res = propagate_coupled_split(model, prior_proposal(model),
                                  np.full((64, 1), 1.2), np.zeros((64, 1)),
                                  grid, incs)
    checks.append(("bootstrap log-ratio is exactly zero",
                   np.all(res.llr == 0.0)))

    # Constant drifts: Lambda matches the closed form.
    a, q = 0.7, 0.5
    model_c = SdeModel(1, 1, lambda x, t: np.full_like(x, a), 1.0, q)
    imp_c = ImportanceSpec(lambda x, t: np.zeros_like(x), None)
    grid_c = TimeGrid(0.0, 1.0, 64)
    incs_c = sample_brownian_increments(grid_c, model_c.diffusion,
                                        np.random.default_rng(1), n_paths=16)
    res_c = propagate_coupled(model_c, imp_c, np.zeros((16, 1)), grid_c, incs_c)
    beta_total = incs_c.values.sum(axis=(1, 2))
    expect = (a / q) * beta_total - 0.5 * a ** 2 / q
    checks.append(("constant-drift log-ratio matches closed form",
                   np.allclose(res_c.llr, expect, rtol=1e-10, atol=1e-10)))

    # Weights average to one over many proposal paths.
    model_m = SdeModel(1, 1, lambda x, t: np.sin(x), 1.0, 1.0)
    grid_m = TimeGrid(0.0, 1.0, 50)
    incs_m = sample_brownian_increments(grid_m, model_m.diffusion,
                                        np.random.default_rng(2), n_paths=20000)
    res_m = propagate_coupled(model_m, imp_c, np.zeros((20000, 1)), grid_m,
                              incs_m)
    z = np.exp(res_m.llr)
    err = abs(z.mean() - 1.0)
    lim = 3.0 * z.std(ddof=1) / math.sqrt(z.size)
    checks.append(("weights average to one (3 standard errors)", err < lim))

    # Conjugate updates: sequential equals batch.
    fam = invchi2_family(2.0, 0.2)
    stats = fam.init_stats(1)
    resids = [0.3, -0.1, 0.25, 0.0]
    for r in resids:
        stats = fam.update(stats, np.zeros(1), r)
    batch_nu = 2.0 + len(resids)
    batch_s2 = (2.0 * 0.2 + sum(r * r for r in resids)) / batch_nu
    checks.append(("variance posterior: sequential equals batch",
                   np.allclose(stats[0], [batch_nu, batch_s2], rtol=1e-14)))

    fam_g = gamma_poisson_family(1.0, 1.0)
    lm = fam_g.log_marginal(0, np.array([1.0]), fam_g.init_stats(1))
    checks.append(("count predictive mass at d=0 is 1/2",
                   np.allclose(np.exp(lm), 0.5, rtol=1e-12)))

    # Systematic resampling offspring counts stay within floor/ceil.
    w = np.array([0.18, 0.02, 0.5, 0.3])
    ok = True
    for s in range(20):
        idx = systematic_resample_indices(w, np.random.default_rng(s))
        counts = np.bincount(idx, minlength=4)
        ok = ok and np.all(counts >= np.floor(4 * w)) \
            and np.all(counts <= np.ceil(4 * w))
    checks.append(("systematic resampling counts within floor/ceil", ok))

    failed = 0
    for name, passed in checks:
        print("%s: %s" % ("PASS" if passed else "FAIL", name))
        failed += 0 if passed else 1
    if failed:
        print("%d of %d checks failed" % (failed, len(checks)))
        return 3
    print("all %d checks passed" % len(checks))
    return 0


# ---------------------------------------------------------------------------
# entry point


def _build_parser():
    ap = argparse.ArgumentParser(
        prog="sdepf",
        description="Particle filtering for SDE state-space models.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, doc in (("simulate", "simulate truth and measurements"),
                      ("filter", "run a filter over measurements"),
                      ("kl", "estimate drift-mismatch KL divergence"),
                      ("selftest", "run built-in numerical checks")):
        sp = sub.add_parser(name, help=doc)
        sp.add_argument("--config", default=None, help="INI config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--particles", type=int, default=None)
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--threads", type=int, default=None)
    return ap


def main(argv=None):
    args = _build_parser().parse_args(argv)
    overrides = {"seed": args.seed, "particles": args.particles,
                 "out": args.out, "threads": args.threads}
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "filter":
            return cmd_filter(cfg)
        if args.command == "kl":
            return cmd_kl(cfg)
        return cmd_selftest(cfg)
    except (ConfigError, ValueError) as exc:
        print("configuration error: %s" % exc, file=sys.stderr)
        return 2
    except (DegeneracyError, IntegrationError, SingularMatrixError,
            DiffusionError) as exc:
        print("numerical failure: %s" % exc, file=sys.stderr)
        return 3
    except OSError as exc:
        print("i/o error: %s" % exc, file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
