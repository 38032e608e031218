"""Experiment harness: sweeps, sample-complexity probes and scaling fits.

Every experiment is a list of independent work items (grid cell, possibly
with a seed).  Items are keyed by a digest of their parameters, mapped over
a bounded process pool, and their rows sorted before anything is written,
so outputs do not depend on worker count or scheduling.  Wall-clock
runtimes go to a separate ``.timing.csv`` file to keep the result files
byte-reproducible.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from .covmodel import (SingleIndexTask, SpikedCovariance, construct_geometry, dataset_covariance,
                       init_first_layer, normalized_direction, resolve_n_prime, sample_dataset,
                       spiked_task)
from .flows import (FlowConfig, default_t_max, integrate_flow, integrate_scalar_batch, scalar_rhs)
from .hermite import (correlation, get_link, information_exponent, series_for)
from .network import TrainConfig, test_risk, train_algorithm1
from .rng import digest, make_rng

log = logging.getLogger(__name__)

EXPERIMENTS = ("theorem1_demo", "tau_scaling", "n_star_probe", "phase_diagram",
               "init_alignment", "stein_check", "full_pipeline")


class ConfigError(ValueError):
    """Experiment configuration that contradicts a hypothesis or is malformed."""


class InfeasibleBracket(RuntimeError):
    pass


# ------------------------------------------------------------------ spec / results


@dataclass
class ExperimentSpec:
    experiment: str
    grid: dict
    seeds: list
    success_prob: float = 0.7
    output_path: Optional[str] = None
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        if not isinstance(self.grid, dict) or not self.grid:
            raise ConfigError("grid must be a nonempty mapping")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if not 0.0 < float(self.success_prob) <= 1.0:
            raise ConfigError("success_prob must lie in (0, 1]")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentSpec":
        known = {"experiment", "grid", "seeds", "success_prob", "output_path", "options"}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown spec keys: {sorted(extra)}")
        if "experiment" not in doc:
            raise ConfigError("spec needs an 'experiment' key")
        seeds = doc.get("seeds", [0])
        if isinstance(seeds, int):
            seeds = list(range(seeds))
        return cls(doc["experiment"], doc.get("grid", {}), list(seeds), doc.get("success_prob", 0.7),
                   doc.get("output_path"), doc.get("options", {}))

    @classmethod
    def from_json(cls, path) -> "ExperimentSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    se: float
    r2: float
    n: int

    def agrees(self, predicted, tol) -> bool:
        """Slope within ``tol`` of the prediction and resolved to better than ``tol``."""
        return bool(abs(self.slope - predicted) <= tol and self.se < tol)

    def to_dict(self) -> dict:
        return asdict(self)


def fit_line(x, y) -> LinearFit:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.size < 2:
        raise ValueError("need at least two points to fit a line")
    r = stats.linregress(x, y)
    se = float(r.stderr) if x.size > 2 else math.nan
    return LinearFit(float(r.slope), float(r.intercept), se, float(r.rvalue**2), int(x.size))


def fit_loglog(x, y) -> LinearFit:
    return fit_line(np.log(x), np.log(y))


@dataclass
class SweepResult:
    experiment: str
    columns: list
    rows: list
    fits: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)  # cell_id -> seconds; not part of the result files

    def column(self, name):
        return [r.get(name) for r in self.rows]

    def to_csv(self, path=None) -> str:
        lines = [",".join(self.columns)]
        for r in self.rows:
            lines.append(",".join(_cell(r.get(c)) for c in self.columns))
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def summary_doc(self) -> dict:
        fits = {k: (v.to_dict() if isinstance(v, LinearFit) else v) for k, v in self.fits.items()}
        return _jsonable({"experiment": self.experiment, "fits": fits, "summary": self.summary})

    def write(self, output_dir, stem: Optional[str] = None):
        os.makedirs(output_dir, exist_ok=True)
        stem = stem or self.experiment
        csv_path = os.path.join(output_dir, f"{stem}.csv")
        json_path = os.path.join(output_dir, f"{stem}.json")
        self.to_csv(csv_path)
        with open(json_path, "w") as fh:
            json.dump(self.summary_doc(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(os.path.join(output_dir, f"{stem}.timing.csv"), "w") as fh:
            fh.write("cell_id,seconds\n")
            for k in sorted(self.timings):
                fh.write(f"{k},{self.timings[k]:.3f}\n")
        return csv_path, json_path


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if math.isfinite(v) else ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    text = str(v)
    return text.replace(",", ";")


def _parse(text: str):
    if text == "":
        return None
    if text in ("true", "false"):
        return text == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def read_rows(path) -> list:
    with open(path, newline="") as fh:
        return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


# ------------------------------------------------------------------ work-item engine


def _timed(job):
    fn, params = job
    t0 = time.perf_counter()
    rows = fn(params)
    return rows, time.perf_counter() - t0


def run_items(fn: Callable, items: Sequence[dict], workers: int = 1, prior_rows=()):
    """Evaluate ``fn(item) -> list of rows`` for every item not already in ``prior_rows``.

    Each row gets a ``cell_id`` (digest of its item).  Returns (rows, timings).
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    done = {}
    for r in prior_rows:
        done.setdefault(r.get("cell_id"), []).append(r)
    keyed = [(digest(it), it) for it in items]
    todo = [(cid, it) for cid, it in keyed if cid not in done]
    if todo:
        log.info("running %d of %d work items", len(todo), len(keyed))
    jobs = [(fn, it) for _, it in todo]
    if workers == 1 or len(jobs) <= 1:
        outs = [_timed(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(_timed, jobs))
    rows, timings = [], {}
    fresh = {}
    for (cid, _), (item_rows, secs) in zip(todo, outs):
        for r in item_rows:
            r["cell_id"] = cid
        fresh[cid] = item_rows
        timings[cid] = secs
    for cid, _ in keyed:
        rows.extend(done.get(cid) or fresh.get(cid, []))
    return rows, timings


def _sorted(rows, keys):
    def key(r):
        out = []
        for k in keys:
            v = r.get(k)
            out.append((0, v) if isinstance(v, (int, float)) else (1, str(v)))
        return out

    return sorted(rows, key=key)


# ------------------------------------------------------------------ equator-trapping demo


def sphere_marginal(d: int, seed, bound: Optional[float] = None):
    """``|<w, u>|`` for ``w`` uniform on the sphere, as ``|z_1| / ||z||``.

    ``z_1`` comes from a stream keyed by the seed only, so the same seed gives
    the same leading coordinate at every d (common random numbers across d);
    ``||z_2..z_d||^2`` is chi-square(d - 1) from a d-keyed stream.  When
    ``bound`` is given, draws with ``|m| sqrt(d) > bound`` are redrawn.
    Returns (m, number of redraws).
    """
    z_rng = make_rng(seed, "marginal", "z1")
    q_rng = make_rng(seed, "marginal", "rest", d)
    redraws = 0
    while True:
        z = z_rng.standard_normal()
        q = q_rng.chisquare(d - 1)
        m = abs(z) / math.sqrt(z * z + q)
        if m > 0 and (bound is None or m * math.sqrt(d) <= bound):
            return m, redraws
        redraws += 1


def _check_theorem1(g_name, phi_name, kappa_exponent):
    g = series_for(g_name)
    s = information_exponent(g)
    if s is None or s <= 2:
        raise ConfigError(f"failure regime needs information exponent s > 2; {g_name} has s={s}")
    if abs(g[0]) > 1e-8 * math.sqrt(g.l2_sq()):
        raise ConfigError(f"failure regime needs E[g] = 0; {g_name} has mean {g[0]:.3g}")
    if not get_link(phi_name).homogeneous:
        raise ConfigError(f"spherical population flow needs ReLU; got {phi_name}")
    top = (s - 2) / (s - 1)
    if not 0.0 <= kappa_exponent <= top:
        raise ConfigError(f"need 1 <= kappa = d^e <= d^((s-2)/(s-1)) = d^{top:.3f}; got e={kappa_exponent}")
    return s


def _sign_corrected_phi(g_name, phi_name, s) -> str:
    """``sign(alpha_s beta_s) phi``: the second-layer sign that satisfies the drift sign condition."""
    ab = series_for(g_name)[s] * series_for(phi_name)[s]
    if ab > 0:
        return phi_name
    return phi_name[4:] if phi_name.startswith("neg:") else f"neg:{phi_name}"


def _theorem1_cell(p):
    d, seeds = p["d"], p["seeds"]
    kappa = float(d) ** p["kappa_exponent"]
    s = p["s"]
    draws = [sphere_marginal(d, sd, p["init_bound"]) for sd in seeds]
    m0 = np.array([m for m, _ in draws])
    sph = integrate_scalar_batch(scalar_rhs("pop_spherical", kappa, p["g"], p["phi"]), m0,
                                 p["dt"], p["t_max"], p["eps"], "rk4", stop_when_all_hit=False)
    # the same initial weight seen through Sigma: <w_bar, u> = m sqrt(1+k) / sqrt(1 + k m^2)
    m0_bar = m0 * math.sqrt(1 + kappa) / np.sqrt(1 + kappa * m0**2)
    t_norm = max(default_t_max(mb, s, p["eps"], 1 / (1 + kappa)) for mb in m0_bar)
    nrm = integrate_scalar_batch(scalar_rhs("pop_normalized", kappa, p["g"], p["contrast_phi"]), m0_bar,
                                 p["contrast_dt"], t_norm, p["eps"], "rk4")
    rows = []
    for i, sd in enumerate(seeds):
        rows.append({
            "d": d, "seed": sd, "kappa": kappa, "m0": m0[i], "redraws": draws[i][1],
            "sup_alignment": sph.sup_abs[i], "sup_ratio": sph.sup_abs[i] * math.sqrt(d),
            "final_spherical": sph.final[i], "m0_bar": m0_bar[i],
            "normalized_final": nrm.final[i],
            "normalized_hit_eps": None if np.isnan(nrm.hit_eps[i]) else nrm.hit_eps[i],
            "normalized_success": bool(nrm.final[i] >= 1 - p["eps"]),
        })
    return rows


THEOREM1_COLUMNS = ["d", "seed", "kappa", "m0", "redraws", "sup_alignment", "sup_ratio",
                    "final_spherical", "m0_bar", "normalized_final", "normalized_hit_eps",
                    "normalized_success", "cell_id"]


def run_theorem1_demo(d_list, kappa_exponent=0.4, g="hermite:4", seeds=range(20), *, phi="relu",
                      t_max=1000.0, dt=0.05, init_bound=3.0, eps=0.01, contrast_dt=2.0,
                      slope_tol=0.1, workers=1, prior_rows=()) -> SweepResult:
    """Spherical flow stuck at the equator scale vs. normalized flow recovering u.

    Both flows use the theta = u scalar reductions.  Initial alignments are
    sphere marginals conditioned on ``|<w0,u>| <= init_bound / sqrt(d)`` (the
    initialization event of the failure theorem) and taken positive by
    symmetry.  The normalized contrast uses the sign-corrected activation.
    """
    s = _check_theorem1(g, phi, kappa_exponent)
    contrast_phi = _sign_corrected_phi(g, phi, s)
    seeds = list(seeds)
    items = [{"experiment": "theorem1_demo", "d": int(d), "kappa_exponent": float(kappa_exponent), "g": g,
              "phi": phi, "contrast_phi": contrast_phi, "s": s, "seeds": seeds, "t_max": float(t_max),
              "dt": float(dt), "init_bound": float(init_bound), "eps": float(eps),
              "contrast_dt": float(contrast_dt)} for d in d_list]
    rows, timings = run_items(_theorem1_cell, items, workers, prior_rows)
    rows = _sorted(rows, ["d", "seed"])
    ds = sorted({r["d"] for r in rows})
    # geometric mean over the common seeds: the seed effect cancels between d values
    gm = [math.exp(np.mean([math.log(r["sup_alignment"]) for r in rows if r["d"] == d])) for d in ds]
    fit = fit_loglog(ds, gm)
    within = all(r["sup_alignment"] <= init_bound / math.sqrt(r["d"]) for r in rows)
    never_up = all(r["sup_alignment"] <= r["m0"] * (1 + 1e-9) for r in rows)
    contrast_ok = all(r["normalized_success"] for r in rows)
    summary = {
        "predicted_slope": -0.5, "slope_tol": slope_tol, "geomean_sup": dict(zip(ds, gm)),
        "max_sup_ratio": max(r["sup_ratio"] for r in rows), "bound_constant": init_bound,
        "all_within_bound": within, "never_exceeds_initial": never_up,
        "redraws": sum(r["redraws"] for r in rows), "draws": len(rows),
        "contrast_phi": contrast_phi, "normalized_all_recover": contrast_ok,
        "slope_pass": fit.agrees(-0.5, slope_tol),
    }
    summary["pass"] = bool(within and summary["slope_pass"] and contrast_ok)
    return SweepResult("theorem1_demo", THEOREM1_COLUMNS, rows, {"sup_vs_d": fit}, summary, timings)


def _large_spike_cell(p):
    d = p["d"]
    m0 = 1.0 / math.sqrt(d)
    kappa = p["C"] / m0**2
    alpha = float(correlation(series_for(p["g"]), series_for(p["phi"]), 1.0))
    T = p["horizon_factor"] * math.log(2 / p["eps"]) / (alpha - 0.5)
    res = integrate_scalar_batch(scalar_rhs("pop_spherical", kappa, p["g"], p["phi"]), [m0],
                                 p["dt"], T, p["eps"], "rk4")
    hit = None if np.isnan(res.hit_eps[0]) else float(res.hit_eps[0])
    return [{"d": d, "m0": m0, "kappa": kappa, "alpha": alpha, "horizon": T, "hit_eps": hit,
             "final": float(res.final[0]), "success": hit is not None}]


LARGE_SPIKE_COLUMNS = ["d", "m0", "kappa", "alpha", "horizon", "hit_eps", "final", "success", "cell_id"]


def run_large_spike(d_list, g="cube", *, phi="relu", C=10.0, eps=0.01, dt=1e-3, horizon_factor=1.5,
                    workers=1, prior_rows=()) -> SweepResult:
    """Spherical flow with ``kappa = C / m0^2`` at ``m0 = 1/sqrt(d)``; needs ``<phi, g> > 1/2``."""
    alpha = float(correlation(series_for(g), series_for(phi), 1.0))
    if not alpha > 0.5:
        raise ConfigError(f"large-spike recovery needs <phi, g> > 1/2; <{phi}, {g}> = {alpha:.4f}")
    items = [{"experiment": "large_spike", "d": int(d), "g": g, "phi": phi, "C": float(C), "eps": float(eps),
              "dt": float(dt), "horizon_factor": float(horizon_factor)} for d in d_list]
    rows, timings = run_items(_large_spike_cell, items, workers, prior_rows)
    rows = _sorted(rows, ["d"])
    ok = all(r["success"] for r in rows)
    return SweepResult("large_spike", LARGE_SPIKE_COLUMNS, rows, {},
                       {"alpha": alpha, "pass": ok, "all_recover": ok}, timings)


# ------------------------------------------------------------------ tau_s scaling


def _tau_cell(p):
    s = p["s"]
    name = f"hermite:{s}"
    m0 = np.array(p["m0_list"], dtype=float)
    rhs = scalar_rhs("pop_normalized", 0.0, name, name)
    t_max = 2.0 * max(default_t_max(m, s, 0.5, 1.0) for m in m0) / 50.0 + 10.0
    res = integrate_scalar_batch(rhs, m0, p["dt"], t_max, 0.5, "rk4")
    return [{"s": s, "m0": float(m), "hit_half": None if np.isnan(h) else float(h)}
            for m, h in zip(m0, res.hit_half)]


TAU_COLUMNS = ["s", "m0", "hit_half", "cell_id"]


def run_tau_scaling(s_list=(3, 4), m0_list=(0.02, 0.05, 0.1, 0.2), *, dt=0.01, tol=0.1,
                    seeds=None, workers=1, prior_rows=()) -> SweepResult:
    """Slope of log hit_half against log(1/m0) for phi = g = h_s, Sigma = I.

    The flow is deterministic; ``seeds`` is accepted so every runner takes the same
    keywords under ``run_experiment``, and is unused.
    """
    items = [{"experiment": "tau_scaling", "s": int(s), "m0_list": [float(m) for m in m0_list],
              "dt": float(dt)} for s in s_list]
    rows, timings = run_items(_tau_cell, items, workers, prior_rows)
    rows = _sorted(rows, ["s", "m0"])
    fits, summary = {}, {}
    for s in sorted({r["s"] for r in rows}):
        sub = [r for r in rows if r["s"] == s and r["hit_half"]]
        fit = fit_line([math.log(1 / r["m0"]) for r in sub], [math.log(r["hit_half"]) for r in sub])
        fits[f"s={s}"] = fit
        summary[f"s={s}"] = {"predicted_slope": s - 2, "pass": fit.agrees(s - 2, tol)}
    summary["pass"] = all(v["pass"] for v in summary.values())
    return SweepResult("tau_scaling", TAU_COLUMNS, rows, fits, summary, timings)


# ------------------------------------------------------------------ sample complexity


@dataclass(frozen=True)
class ProbeSetup:
    """One (task family, flow) cell of a sample-complexity probe."""

    d: int
    r1: float
    r2: float
    link: str = "hermite:2"
    sigma: float = 0.0
    kind: str = "emp_precond"
    eps: float = 0.1
    phi: str = "relu"
    n_prime_mode: str = "squared"
    n_prime_cap: int = 200_000
    dt: float = 0.05  # in units of 1 / lambda_max(Sigma_hat)

    def to_dict(self):
        return asdict(self)


def seed_succeeds(setup: ProbeSetup, seed, n: int) -> tuple:
    """Run the empirical flow for one seed at sample size n; returns (success, final alignment)."""
    task = spiked_task(setup.d, setup.r1, setup.r2, get_link(setup.link), setup.sigma, seed)
    n_prime = resolve_n_prime(setup.n_prime_mode, n, cap=setup.n_prime_cap)
    ds = sample_dataset(task, n, n_prime, ("probe", seed))
    cov_hat = dataset_covariance(ds)
    w0 = init_first_layer(setup.d, seed, True, cov_hat, task.u_bar)
    cfg = FlowConfig(dt=setup.dt / cov_hat.lambda_max, eps_target=setup.eps)
    tr = integrate_flow(setup.kind, w0, ds, cfg, cov_hat=cov_hat, task=task, phi=setup.phi, seed=seed)
    return tr.hit_eps is not None, tr.final_alignment


def _geometric_search(ok: Callable[[int], bool], n_lo: int, n_hi: int, resolution: float = 1.1):
    """Smallest n (to a factor ``resolution``) with ``ok(n)``, by doubling then bisection in log n.

    Returns (n_star, probes) or (None, probes) when even ``n_hi`` fails."""
    probes = 0
    n = int(n_lo)
    last_fail = None
    while True:
        probes += 1
        if ok(n):
            break
        last_fail = n
        if n >= n_hi:
            return None, probes
        n = min(2 * n, int(n_hi))
    hi = n
    if last_fail is None:
        return hi, probes
    lo = last_fail
    while hi / lo > resolution:
        mid = int(round(math.sqrt(lo * hi)))
        if mid <= lo or mid >= hi:
            break
        probes += 1
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi, probes


def probe_sample_complexity(setup: ProbeSetup, seeds, success_prob=0.7, n_bounds=(16, 1 << 17),
                            resolution=1.1) -> int:
    """Smallest n at which at least ``success_prob`` of the seeds reach ``1 - eps``."""
    seeds = list(seeds)
    n_lo, n_hi = n_bounds
    need = math.ceil(success_prob * len(seeds) - 1e-9)

    def ok(n):
        return sum(seed_succeeds(setup, sd, n)[0] for sd in seeds) >= need

    if not ok(n_hi):
        raise InfeasibleBracket(f"success rate below {success_prob} at n={n_hi} for {setup.to_dict()}")
    n_star, _ = _geometric_search(ok, n_lo, n_hi, resolution)
    return n_star


def _threshold_cell(p):
    setup = ProbeSetup(**p["setup"])
    seed = p["seed"]
    final = {}

    def ok(n):
        hit, final[n] = seed_succeeds(setup, seed, n)
        return hit

    n_star, probes = _geometric_search(ok, p["n_lo"], p["n_hi"], p["resolution"])
    row = dict(setup.to_dict())
    row.update(seed=seed, n_star=n_star, probes=probes, feasible=n_star is not None,
               final_alignment=final.get(n_star) if n_star else None)
    return [row]


THRESHOLD_COLUMNS = ["d", "r1", "r2", "link", "sigma", "kind", "eps", "seed", "n_star", "feasible",
                     "probes", "final_alignment", "cell_id"]


def aggregate_n_star(per_seed, success_prob):
    """Smallest n at which ``success_prob`` of the seeds have crossed their own threshold."""
    vals = sorted(math.inf if v is None else v for v in per_seed)
    k = math.ceil(success_prob * len(vals) - 1e-9)
    v = vals[max(k, 1) - 1]
    return None if math.isinf(v) else v


def run_seed_thresholds(setups, seeds, n_lo=16, n_hi=1 << 17, resolution=1.1, workers=1, prior_rows=()):
    items = [{"experiment": "n_star", "setup": st.to_dict(), "seed": sd, "n_lo": int(n_lo),
              "n_hi": int(n_hi), "resolution": float(resolution)} for st in setups for sd in seeds]
    rows, timings = run_items(_threshold_cell, items, workers, prior_rows)
    return _sorted(rows, ["kind", "d", "r1", "r2", "link", "sigma", "eps", "seed"]), timings


def _cell_key(r):
    return (r["kind"], r["d"], r["r1"], r["r2"], r["link"], r["sigma"], r["eps"])


def run_n_star_probe(d_list, r1=0.0, r2=1.0, link="hermite:2", kinds=("emp_normalized", "emp_precond"),
                     eps=0.1, sigma=0.0, seeds=range(10), success_prob=0.7, n_lo=16, n_hi=1 << 17,
                     resolution=1.1, workers=1, prior_rows=(), **setup_kw) -> SweepResult:
    """Per-seed sample thresholds; summary holds per-cell medians and the aggregate n_star."""
    setups = [ProbeSetup(int(d), float(r1), float(r2), link, float(sigma), kind, float(eps), **setup_kw)
              for kind in kinds for d in d_list]
    rows, timings = run_seed_thresholds(setups, list(seeds), n_lo, n_hi, resolution, workers, prior_rows)
    summary = {}
    for key in sorted({_cell_key(r) for r in rows}, key=str):
        vals = [r["n_star"] for r in rows if _cell_key(r) == key]
        finite = [v if v is not None else math.inf for v in vals]
        med = float(np.median(finite))
        summary["|".join(map(str, key))] = {
            "kind": key[0], "d": key[1], "median_n_star": None if math.isinf(med) else med,
            "n_star": aggregate_n_star(vals, success_prob), "infeasible_seeds": sum(v is None for v in vals)}
    return SweepResult("n_star_probe", THRESHOLD_COLUMNS, rows, {}, summary, timings)


# ------------------------------------------------------------------ phase diagram


def regime(r1, r2, tol=1e-12) -> str:
    if abs(r2 - r1) <= tol or abs(r2 - 2 * r1) <= tol:
        return "boundary"
    if r2 < r1:
        return "weak_spike"
    if r2 < 2 * r1:
        return "intermediate"
    return "strong_spike"


def predicted_exponent(r1, r2, s, precond: bool) -> Optional[float]:
    """d-exponent of the sample complexity (the d^(s-1)-type term, eps fixed)."""
    reg = regime(r1, r2)
    if reg == "boundary":
        return None
    inner = {"weak_spike": 1.0, "intermediate": 1.0 - 2 * (r2 - r1), "strong_spike": 1.0 - r2}[reg]
    return 1.0 + (0.0 if precond else 2 * r2) + (s - 1) * inner


def phase_diagram(d_list, r1_grid, r2_grid, s=2, eps=0.1, kind="emp_precond", seeds=range(10),
                  success_prob=0.7, n_lo=16, n_hi=1 << 17, resolution=1.1, tol=0.5, workers=1,
                  prior_rows=(), **setup_kw) -> SweepResult:
    """Fit log n_star vs log d in each (r1, r2) cell and compare with the predicted exponent."""
    if len(d_list) < 3:
        raise ConfigError("phase diagram needs at least three d values for exponent fitting")
    link = f"hermite:{s}"
    setups = [ProbeSetup(int(d), float(r1), float(r2), link, 0.0, kind, float(eps), **setup_kw)
              for r1 in r1_grid for r2 in r2_grid for d in d_list]
    rows, timings = run_seed_thresholds(setups, list(seeds), n_lo, n_hi, resolution, workers, prior_rows)
    fits, summary = {}, {}
    for r1 in r1_grid:
        for r2 in r2_grid:
            name = f"r1={r1},r2={r2}"
            cell = {"r1": r1, "r2": r2, "regime": regime(r1, r2),
                    "predicted": predicted_exponent(r1, r2, s, kind == "emp_precond")}
            ns = {}
            for d in d_list:
                vals = [r["n_star"] for r in rows if r["d"] == d and r["r1"] == r1 and r["r2"] == r2]
                ns[int(d)] = aggregate_n_star(vals, success_prob)
            cell["n_star"] = ns
            good = [(d, n) for d, n in ns.items() if n is not None]
            if len(good) == len(ns) and len(good) >= 2:
                fit = fit_loglog([d for d, _ in good], [n for _, n in good])
                fits[name] = fit
                cell["fitted"] = fit.slope
                cell["se"] = fit.se
                if cell["predicted"] is not None:
                    cell["agrees"] = bool(abs(fit.slope - cell["predicted"]) <= tol + (fit.se if fit.se == fit.se else 0))
            else:
                cell["status"] = "failed"
            summary[name] = cell
    return SweepResult("phase_diagram", THRESHOLD_COLUMNS, rows, fits, summary, timings)


# ------------------------------------------------------------------ initial alignment


def predicted_init_slope(r1, r2) -> Optional[float]:
    reg = regime(r1, r2)
    return {"weak_spike": -0.5, "intermediate": r2 - r1 - 0.5,
            "strong_spike": (r2 - 1) / 2, "boundary": None}[reg]


def init_alignment(d, r1, r2, seed) -> float:
    """``<w_bar0, u_bar>`` under the population covariance for a uniform ``w0``."""
    u, theta, kappa = construct_geometry(d, r1, r2, seed)
    cov = SpikedCovariance(d, kappa, theta)
    w0 = init_first_layer(d, seed)
    return float(normalized_direction(cov, w0) @ normalized_direction(cov, u))


def _init_cell(p):
    return [{"d": p["d"], "r1": p["r1"], "r2": p["r2"], "seed": sd,
             "alignment": init_alignment(p["d"], p["r1"], p["r2"], sd)} for sd in p["seeds"]]


INIT_COLUMNS = ["r1", "r2", "d", "seed", "alignment", "cell_id"]


def init_alignment_stats(d_list, r1, r2, seeds=range(200), tol=0.15, workers=1, prior_rows=()) -> SweepResult:
    """Median ``|<w_bar0, u_bar>|`` per d and its log-log slope."""
    seeds = list(seeds)
    if len(seeds) < 100:
        raise ConfigError("initial-alignment statistics need at least 100 seeds per d")
    items = [{"experiment": "init_alignment", "d": int(d), "r1": float(r1), "r2": float(r2), "seeds": seeds}
             for d in d_list]
    rows, timings = run_items(_init_cell, items, workers, prior_rows)
    rows = _sorted(rows, ["r1", "r2", "d", "seed"])
    ds = sorted({r["d"] for r in rows})
    med = [float(np.median([abs(r["alignment"]) for r in rows if r["d"] == d])) for d in ds]
    fit = fit_loglog(ds, med)
    pred = predicted_init_slope(r1, r2)
    summary = {"regime": regime(r1, r2), "predicted_slope": pred, "median_abs_alignment": dict(zip(ds, med)),
               "pass": bool(pred is not None and fit.agrees(pred, tol))}
    return SweepResult("init_alignment", INIT_COLUMNS, rows, {"median_vs_d": fit}, summary, timings)


# ------------------------------------------------------------------ Stein identity


def stein_check(f, g, w, u, n_mc: int = 10**6, seed=0, chunk: int = 200_000) -> dict:
    """Monte-Carlo check of ``E[f(a) g(b) z] = E[f g'(b)] u + E[f (g a - g' <u,w>)] w``.

    ``a = <w,z>``, ``b = <u,z>``.  Both sides are averaged over the same draws;
    the per-draw difference gives the standard error of each component.
    """
    f = get_link(f) if isinstance(f, str) else f
    g = get_link(g) if isinstance(g, str) else g
    w, u = np.asarray(w, dtype=float), np.asarray(u, dtype=float)
    if abs(np.linalg.norm(w) - 1) > 1e-12 or abs(np.linalg.norm(u) - 1) > 1e-12:
        raise ValueError("w and u must be unit vectors")
    d = w.size
    rho = float(w @ u)
    rng = make_rng(seed, "stein", f.name, g.name)
    s1 = np.zeros(d)
    s2 = np.zeros(d)
    lhs = np.zeros(d)
    lhs2 = np.zeros(d)
    done = 0
    while done < n_mc:
        k = min(chunk, n_mc - done)
        z = rng.standard_normal((k, d))
        a, b = z @ w, z @ u
        fa, gb, dgb = f(a), g(b), g.deriv(b)
        left = (fa * gb)[:, None] * z
        right = (fa * dgb)[:, None] * u + (fa * (gb * a - dgb * rho))[:, None] * w
        diff = left - right
        s1 += diff.sum(axis=0)
        s2 += (diff * diff).sum(axis=0)
        lhs += left.sum(axis=0)
        lhs2 += (left * left).sum(axis=0)
        done += k
    mean = s1 / n_mc
    var = np.maximum(s2 / n_mc - mean**2, 0.0)
    se = np.sqrt(var / n_mc)
    ratio = np.abs(mean) / np.where(se > 0, se, np.inf)
    i = int(np.argmax(np.abs(mean)))
    lhs = lhs / n_mc
    lhs_se = np.sqrt(np.maximum(lhs2 / n_mc - lhs**2, 0.0) / n_mc)
    return {"max_dev": float(np.abs(mean).max()), "se": float(se[i]), "max_ratio": float(ratio.max()),
            "lhs": lhs, "lhs_se": lhs_se, "deviation": mean, "component_se": se}


def _stein_cell(p):
    rho = p["rho"]
    d = p["d"]
    w = np.zeros(d)
    w[0] = 1.0
    u = np.zeros(d)
    u[0], u[1] = rho, math.sqrt(1 - rho * rho)
    out = stein_check(p["f"], p["g"], w, u, p["n_mc"], p["seed"])
    return [{"f": p["f"], "g": p["g"], "rho": rho, "seed": p["seed"], "max_dev": out["max_dev"],
             "se": out["se"], "max_ratio": out["max_ratio"], "pass": out["max_ratio"] <= p["k_se"]}]


STEIN_COLUMNS = ["f", "g", "rho", "seed", "max_dev", "se", "max_ratio", "pass", "cell_id"]


def run_stein_checks(cases, seeds=(0,), n_mc=10**6, d=3, k_se=4.0, workers=1, prior_rows=()) -> SweepResult:
    items = [{"experiment": "stein_check", "f": c["f"], "g": c["g"], "rho": float(c["rho"]), "d": int(d),
              "n_mc": int(n_mc), "seed": sd, "k_se": float(k_se)} for c in cases for sd in seeds]
    rows, timings = run_items(_stein_cell, items, workers, prior_rows)
    rows = _sorted(rows, ["f", "g", "rho", "seed"])
    return SweepResult("stein_check", STEIN_COLUMNS, rows, {},
                       {"pass": all(r["pass"] for r in rows), "k_se": k_se}, timings)


# ------------------------------------------------------------------ full pipeline


def _pipeline_cell(p):
    task = spiked_task(p["d"], p["r1"], p["r2"], get_link(p["link"]), p["sigma"], p["seed"])
    cfg = TrainConfig(m=p["m"], n=p["n"], seed=p["seed"], stage1_kind=p["kind"], c_lam=p["c_lam"],
                      stage1=FlowConfig(dt=p["dt"], eps_target=p["eps"]), n_prime_mode=p["n_prime_mode"],
                      n_prime_cap=p["n_prime_cap"])
    res = train_algorithm1(task, cfg)
    risk = test_risk(res.net, task, p["n_test"], p["seed"])
    return [{"d": p["d"], "r1": p["r1"], "r2": p["r2"], "link": p["link"], "sigma": p["sigma"], "kind": p["kind"],
             "m": p["m"], "n": p["n"], "seed": p["seed"], "alignment": res.alignment, "lam": res.lam,
             "Delta": res.Delta, "risk": risk, "excess_risk": risk - p["sigma"] ** 2}]


PIPELINE_COLUMNS = ["d", "r1", "r2", "link", "sigma", "kind", "m", "n", "seed", "alignment", "lam", "Delta",
                    "risk", "excess_risk", "cell_id"]


def run_full_pipeline(d=32, r1=0.0, r2=1.0, m_list=(32, 512), n_list=(8000,), link="hermite:2", sigma=0.1,
                      kind="emp_precond", eps=0.001, c_lam=0.1, seeds=range(5), n_test=100_000, dt=0.05,
                      n_prime_mode="squared", n_prime_cap=200_000, workers=1, prior_rows=()) -> SweepResult:
    """Algorithm 1 end to end over widths and sample sizes; per-cell median test risk."""
    dl = d if isinstance(d, (list, tuple)) else [d]
    r2l = r2 if isinstance(r2, (list, tuple)) else [r2]
    items = [{"experiment": "full_pipeline", "d": int(dd), "r1": float(r1), "r2": float(rr), "m": int(m),
              "n": int(n), "link": link, "sigma": float(sigma), "kind": kind, "eps": float(eps),
              "c_lam": float(c_lam), "seed": sd, "n_test": int(n_test), "dt": float(dt),
              "n_prime_mode": n_prime_mode, "n_prime_cap": int(n_prime_cap)}
             for dd in dl for rr in r2l for m in m_list for n in n_list for sd in seeds]
    rows, timings = run_items(_pipeline_cell, items, workers, prior_rows)
    rows = _sorted(rows, ["d", "r2", "m", "n", "seed"])
    summary = {}
    for key in sorted({(r["d"], r["r2"], r["m"], r["n"]) for r in rows}):
        risks = [r["risk"] for r in rows if (r["d"], r["r2"], r["m"], r["n"]) == key]
        summary[f"d={key[0]},r2={key[1]},m={key[2]},n={key[3]}"] = {
            "d": key[0], "r2": key[1], "m": key[2], "n": key[3], "median_risk": float(np.median(risks)),
            "median_excess": float(np.median(risks)) - sigma**2}
    return SweepResult("full_pipeline", PIPELINE_COLUMNS, rows, {}, summary, timings)


# ------------------------------------------------------------------ spec dispatch


def _kwargs(grid: dict, allowed: Sequence[str]):
    extra = set(grid) - set(allowed)
    if extra:
        raise ConfigError(f"unknown grid keys {sorted(extra)}; allowed: {sorted(allowed)}")
    return dict(grid)


_RUNNERS = {
    "theorem1_demo": (run_theorem1_demo, ["d_list", "kappa_exponent", "g", "phi", "t_max", "dt", "init_bound",
                                          "eps", "contrast_dt", "slope_tol"]),
    "tau_scaling": (run_tau_scaling, ["s_list", "m0_list", "dt", "tol"]),
    "n_star_probe": (run_n_star_probe, ["d_list", "r1", "r2", "link", "kinds", "eps", "sigma", "n_lo", "n_hi",
                                        "resolution", "phi", "n_prime_mode", "n_prime_cap", "dt"]),
    "phase_diagram": (phase_diagram, ["d_list", "r1_grid", "r2_grid", "s", "eps", "kind", "n_lo", "n_hi",
                                      "resolution", "tol", "phi", "n_prime_mode", "n_prime_cap", "dt"]),
    "init_alignment": (None, ["d_list", "cells", "tol"]),
    "stein_check": (run_stein_checks, ["cases", "n_mc", "d", "k_se"]),
    "full_pipeline": (run_full_pipeline, ["d", "r1", "r2", "m_list", "n_list", "link", "sigma", "kind", "eps",
                                          "c_lam", "n_test", "dt", "n_prime_mode", "n_prime_cap"]),
}


def run_experiment(spec: ExperimentSpec, output_dir=None, workers: int = 1, resume: bool = True) -> dict:
    """Run a spec, write ``<experiment>.csv`` / ``.json`` files and return their summaries.

    With ``resume``, rows already present in the output CSV are reused and
    their work items skipped.
    """
    out_dir = output_dir or spec.output_path or "."
    fn, allowed = _RUNNERS[spec.experiment]
    kw = _kwargs(spec.grid, allowed)
    kw.update(spec.options.get("overrides", {}))

    def prior(stem):
        path = os.path.join(out_dir, f"{stem}.csv")
        return read_rows(path) if resume and os.path.exists(path) else ()

    results = []
    try:
        if spec.experiment == "init_alignment":
            cells = kw.pop("cells")
            for r1, r2 in cells:
                stem = f"init_alignment_r1={r1}_r2={r2}"
                res = init_alignment_stats(kw["d_list"], r1, r2, spec.seeds, kw.get("tol", 0.15), workers,
                                           prior(stem))
                results.append((stem, res))
        else:
            if spec.experiment in ("n_star_probe", "phase_diagram"):
                kw.setdefault("success_prob", spec.success_prob)
            large = spec.options.get("large_spike")
            res = fn(seeds=spec.seeds, workers=workers, prior_rows=prior(spec.experiment), **kw) \
                if spec.experiment != "stein_check" else \
                fn(kw.pop("cases"), seeds=spec.seeds, workers=workers, prior_rows=prior(spec.experiment), **kw)
            results.append((spec.experiment, res))
            if spec.experiment == "theorem1_demo" and large:
                results.append(("large_spike", run_large_spike(workers=workers, prior_rows=prior("large_spike"),
                                                               **large)))
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    docs = {}
    for stem, res in results:
        res.write(out_dir, stem)
        docs[stem] = res.summary_doc()
    return docs
