"""Population and empirical alignment dynamics and a fixed-step integrator.

State conventions, by flow kind:

* ``pop_spherical``: ``w`` on the unit sphere (raw weight);
* ``pop_normalized`` / ``pop_precond``: the normalized direction ``w_bar``;
* ``emp_normalized`` / ``emp_precond``: raw ``w``, rescaled after each step
  so that ``||Sigma_hat^{1/2} w|| = 1``.  The empirical objective is
  0-homogeneous and its flow conserves that norm, so the rescaling only
  removes discretization drift.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .covmodel import (Covariance, Dataset, SingleIndexTask, SpikedCovariance,
                       normalized_direction, sigma_norm)
from .hermite import (HermiteSeries, LinkFunction, correlation, get_link,
                      information_exponent, psi, series_for, zeta)

KINDS = ("pop_spherical", "pop_normalized", "pop_precond", "emp_normalized", "emp_precond")
POPULATION_KINDS = KINDS[:3]
EMPIRICAL_KINDS = KINDS[3:]


class UnsupportedActivation(ValueError):
    pass


class IntegrationDiverged(FloatingPointError):
    """A step produced a non-finite state; ``trace`` holds everything before it."""

    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace


# ---------------------------------------------------------------- config / trace


@dataclass(frozen=True)
class FlowConfig:
    dt: float = 1e-3
    t_max: Optional[float] = None  # None: derived from tau_s and lambda_min
    eps_target: float = 0.01
    record_stride: int = 1
    integrator: str = "euler"
    stop_on: str = "bar"  # which alignment triggers early stop: bar, raw or none

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.t_max is not None and not self.dt < self.t_max:
            raise ValueError("need dt < t_max")
        if not 0.0 < self.eps_target < 1.0:
            raise ValueError("eps_target must lie in (0, 1)")
        if self.record_stride < 1:
            raise ValueError("record_stride must be >= 1")
        if self.integrator not in ("euler", "rk4"):
            raise ValueError(f"unknown integrator {self.integrator!r}")
        if self.stop_on not in ("bar", "raw", "none"):
            raise ValueError(f"unknown stop_on {self.stop_on!r}")


@dataclass
class FlowTrace:
    times: np.ndarray
    alignments_bar: np.ndarray
    alignments_raw: np.ndarray
    final_w: np.ndarray
    hit_half: Optional[float]
    hit_eps: Optional[float]
    sup_alignment: float
    meta: dict = field(default_factory=dict)

    @property
    def final_alignment(self) -> float:
        return float(self.alignments_bar[-1])

    def to_csv(self, path=None) -> str:
        """Write ``t,alignment_bar,alignment_raw`` with ``# key=value`` metadata lines."""
        buf = io.StringIO()
        meta = dict(self.meta)
        meta.update(hit_half=self.hit_half, hit_eps=self.hit_eps, sup_alignment=self.sup_alignment)
        for k in sorted(meta):
            buf.write(f"# {k}={_fmt(meta[k])}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "alignment_bar", "alignment_raw"])
        for row in zip(self.times, self.alignments_bar, self.alignments_raw):
            w.writerow([_fmt(v) for v in row])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def read_trace_csv(path):
    """Parse a trace CSV back into (meta dict, array of rows)."""
    meta, rows = {}, []
    with open(path) as fh:
        for line in fh:
            if line.startswith("# "):
                k, _, v = line[2:].rstrip("\n").partition("=")
                meta[k] = v
            elif line.startswith("t,"):
                continue
            elif line.strip():
                rows.append([float(x) for x in line.split(",")])
    return meta, np.array(rows)


# ---------------------------------------------------------------- helpers


def tau_s(z, s) -> float:
    """Convergence-time profile: 1, ln(1/z), z^-(s-2) for s = 1, 2, > 2."""
    z = float(z)
    if not z > 0:
        return math.inf
    if s == 1:
        return 1.0
    if s == 2:
        return math.log(1.0 / z) if z < 1 else 0.0
    return z ** (-(s - 2))


def _series(x, J=None) -> HermiteSeries:
    if isinstance(x, HermiteSeries):
        return x
    if isinstance(x, LinkFunction):
        x = x.name
    return series_for(x) if J is None else series_for(x, J)


def _proj(w, v):
    return v - float(v @ w) * w


class _Drift:
    """Precomputed power-series coefficients of zeta, psi and the correlation
    for one (g, phi) pair; scalar evaluation by Horner's rule."""

    def __init__(self, g: HermiteSeries, phi: HermiteSeries):
        J = max(g.truncation_order, phi.truncation_order)
        a, b = g.padded(J), phi.padded(J)
        j = np.arange(1, J + 1)
        k = np.arange(0, J - 1)
        self.zeta_c = self._trim(-(j * a[1:] * b[1:]))
        self.psi_c = self._trim(-(np.sqrt((k + 1.0) * (k + 2.0)) * a[: J - 1] * b[2:]))
        self.corr_c = self._trim(a * b)

    @staticmethod
    def _trim(c):
        # drop trailing rounding-level coefficients, then store highest degree first
        c = np.asarray(c, dtype=float)
        big = np.nonzero(np.abs(c) > 1e-14 * max(np.max(np.abs(c), initial=0.0), 1e-300))[0]
        c = c[: big[-1] + 1] if big.size else c[:1] * 0.0
        return tuple(float(v) for v in c[::-1])

    @staticmethod
    def _horner(c, x):
        acc = 0.0
        for ci in c:
            acc = acc * x + ci
        return acc

    def zeta(self, m):
        return self._horner(self.zeta_c, m)

    def psi(self, m):
        return self._horner(self.psi_c, m)

    def corr(self, m):
        return self._horner(self.corr_c, m)


def alignment_bar(w, cov_hat: Covariance, u, cov: Covariance) -> float:
    """``<Sigma_hat^{1/2} w / ||.||, Sigma^{1/2} u / ||.||>``."""
    return float(normalized_direction(cov_hat, w) @ normalized_direction(cov, u))


def raw_alignment(w, u) -> float:
    w = np.asarray(w, dtype=float)
    nrm = np.linalg.norm(w)
    if not nrm > 0:
        raise FloatingPointError("zero weight vector")
    return float(w @ u / nrm)


# ---------------------------------------------------------------- population RHS


def _spherical_coeffs(rho, sw, su, g, phi):
    e_pg = correlation(g, phi, rho)
    e_dd = -zeta(g, phi, rho)
    phi_sq = phi.sq_norm if phi.sq_norm is not None else phi.l2_sq()
    psi_t = (-e_pg + e_dd * rho) / sw + phi_sq
    zeta_t = -e_dd / su
    return psi_t, zeta_t


def _require_homogeneous(phi: HermiteSeries):
    try:
        link = get_link(phi.name)
    except ValueError:
        link = None
    if link is None or not link.homogeneous:
        raise UnsupportedActivation(
            f"spherical population gradient needs a 1-homogeneous activation (ReLU), got {phi.name!r}")


def population_spherical_rhs(w, task: SingleIndexTask, g_series=None, phi_series="relu"):
    """``-(I - w w^T) Sigma (psi_t w + zeta_t u)`` for unit ``w``."""
    g = _series(task.link if g_series is None else g_series)
    phi = _series(phi_series)
    _require_homogeneous(phi)
    w = np.asarray(w, dtype=float)
    cov = task.covariance
    sw = sigma_norm(cov, w)
    su = sigma_norm(cov, task.u)
    rho = float(cov.apply(1.0, w) @ task.u) / (sw * su)
    psi_t, zeta_t = _spherical_coeffs(rho, sw, su, g, phi)
    grad = cov.apply(1.0, psi_t * w + zeta_t * task.u)
    return -_proj(w, grad)


def spherical_scalar_rhs(m, kappa, g_series, phi_series="relu"):
    """d<w,u>/dt for the spherical flow when theta = u.  Vectorized over m."""
    g, phi = _series(g_series), _series(phi_series)
    _require_homogeneous(phi)
    m = np.asarray(m, dtype=float)
    sw = np.sqrt((1.0 + kappa * m * m) / (1.0 + kappa))
    rho = m / sw
    psi_t, zeta_t = _spherical_coeffs(rho, sw, 1.0, g, phi)
    out = -(zeta_t + kappa * psi_t * m / (1.0 + kappa)) * (1.0 - m * m)
    return float(out) if out.ndim == 0 else out


def population_normalized_rhs(w_bar, task: SingleIndexTask, g_series=None, phi_series="relu"):
    """``-zeta(m) (I - w w^T) Sigma (I - w w^T) u_bar``."""
    g = _series(task.link if g_series is None else g_series)
    phi = _series(phi_series)
    w_bar = np.asarray(w_bar, dtype=float)
    u_bar = task.u_bar
    m = float(w_bar @ u_bar)
    inner = task.covariance.apply(1.0, _proj(w_bar, u_bar))
    return -float(zeta(g, phi, m)) * _proj(w_bar, inner)


def population_precond_rhs(w_bar, task: SingleIndexTask, g_series=None, phi_series="relu"):
    """``(I - w w^T)(-zeta(m) u_bar - psi(m) w)``; the psi term is killed by the projector."""
    g = _series(task.link if g_series is None else g_series)
    phi = _series(phi_series)
    w_bar = np.asarray(w_bar, dtype=float)
    u_bar = task.u_bar
    m = float(w_bar @ u_bar)
    v = -float(zeta(g, phi, m)) * u_bar - float(psi(g, phi, m)) * w_bar
    return _proj(w_bar, v)


def normalized_scalar_rhs(m, kappa, g_series, phi_series="relu"):
    """Alignment derivative of the normalized population flow when theta = u."""
    z = zeta(_series(g_series), _series(phi_series), m)
    m = np.asarray(m, dtype=float)
    perp = 1.0 - m * m
    out = -z * perp * (perp + m * m / (1.0 + kappa))
    return float(out) if out.ndim == 0 else out


def precond_scalar_rhs(m, g_series, phi_series="relu"):
    z = zeta(_series(g_series), _series(phi_series), m)
    m = np.asarray(m, dtype=float)
    out = -z * (1.0 - m * m)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------- empirical objective


def empirical_corr_grad(w, dataset: Dataset, cov_hat: Covariance, phi: LinkFunction):
    """Negated empirical correlation ``-(1/n) sum phi(<w,x>/s) y`` and its gradient.

    ``s = ||Sigma_hat^{1/2} w||``; the gradient passes through ``s``:
    ``-(1/(n s)) [X^T(phi'(a) y) - (sum phi'(a) y a) Sigma_hat w / s]``.
    """
    w = np.asarray(w, dtype=float)
    X, y = dataset.inputs, dataset.responses
    sw_vec = cov_hat.apply(1.0, w)
    s2 = float(w @ sw_vec)
    if not s2 > 0 or not math.isfinite(s2):
        raise FloatingPointError("degenerate ||Sigma_hat^{1/2} w||")
    s = math.sqrt(s2)
    a = X @ w / s
    n = X.shape[0]
    value = -float(np.dot(phi(a), y)) / n
    dy = phi.deriv(a) * y
    grad = -(X.T @ dy - float(dy @ a) * sw_vec / s) / (n * s)
    return value, grad


# ---------------------------------------------------------------- integrator


def _rk4(f, x, dt):
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def _step(f, x, dt, integrator):
    return x + dt * f(x) if integrator == "euler" else _rk4(f, x, dt)


def default_t_max(m0, s, eps, lambda_min, precond=False) -> float:
    """``50 (tau_s(m0) + ln(1/eps)) / lambda_min``; preconditioned flows drop the 1/lambda_min."""
    base = tau_s(max(m0, 1e-12), s) + math.log(1.0 / eps)
    return 50.0 * base / (1.0 if precond else lambda_min)


class _Recorder:
    def __init__(self, cfg: FlowConfig):
        self.cfg = cfg
        self.t, self.bar, self.raw = [], [], []
        self.hit_half = self.hit_eps = None
        self.sup = 0.0

    def observe(self, step, t, bar, raw, force=False):
        """Returns True when the stopping rule fires."""
        self.sup = max(self.sup, abs(raw))
        target = {"bar": bar, "raw": raw, "none": bar}[self.cfg.stop_on]
        crossed = False
        if self.hit_half is None and target >= 0.5:
            self.hit_half, crossed = t, True
        if self.hit_eps is None and target >= 1.0 - self.cfg.eps_target:
            self.hit_eps, crossed = t, True
        if force or crossed or step % self.cfg.record_stride == 0:
            if not self.t or t > self.t[-1]:
                self.t.append(t)
                self.bar.append(bar)
                self.raw.append(raw)
        return self.cfg.stop_on != "none" and self.hit_eps is not None

    def trace(self, final_w, meta) -> FlowTrace:
        return FlowTrace(np.array(self.t), np.clip(self.bar, -1, 1), np.clip(self.raw, -1, 1),
                         np.array(final_w, dtype=float), self.hit_half, self.hit_eps, self.sup, meta)


def _unit(x):
    nrm = math.sqrt(float(x @ x))
    if not nrm > 0 or not math.isfinite(nrm):
        raise FloatingPointError("state lost its norm")
    return x / nrm


def integrate_flow(kind, w0, source, config: FlowConfig = FlowConfig(), *, g_series=None,
                   phi="relu", cov_hat: Optional[Covariance] = None, task: Optional[SingleIndexTask] = None,
                   seed=None) -> FlowTrace:
    """Integrate one flow from ``w0`` (a raw weight vector for every kind).

    ``source`` is the task for population kinds and the dataset for empirical
    kinds; empirical kinds also need ``cov_hat`` and the generating ``task``
    (its ``u`` and population covariance define ``u_bar``).
    """
    if kind not in KINDS:
        raise ValueError(f"unknown flow kind {kind!r}")
    phi_link = phi if isinstance(phi, LinkFunction) else get_link(phi)
    if kind in POPULATION_KINDS:
        task = source
        dataset = None
    else:
        dataset = source
        if task is None or cov_hat is None:
            raise ValueError("empirical flows need the task and cov_hat")
    cov = task.covariance
    u, u_bar = task.u, task.u_bar
    g = _series(task.link if g_series is None else g_series)
    phi_s = _series(phi_link)
    s = information_exponent(g) or 1
    w0 = np.asarray(w0, dtype=float)
    cfg = config

    drift = _Drift(g, phi_s)
    if kind == "pop_spherical":
        _require_homogeneous(phi_s)
        x = _unit(w0)
        su = sigma_norm(cov, u)
        phi_sq = phi_s.sq_norm if phi_s.sq_norm is not None else phi_s.l2_sq()

        def f(w):
            sig_w = cov.apply(1.0, w, check=False)
            sw = math.sqrt(float(w @ sig_w))
            rho = float(sig_w @ u) / (sw * su)
            e_dd = -drift.zeta(rho)
            psi_t = (-drift.corr(rho) + e_dd * rho) / sw + phi_sq
            grad = psi_t * sig_w - (e_dd / su) * cov.apply(1.0, u, check=False)
            return -_proj(w, grad)

        bar_of = lambda w: float(normalized_direction(cov, w) @ u_bar)
        raw_of = lambda w: float(w @ u)
        w_of = lambda w: w
        renorm = _unit
    elif kind in ("pop_normalized", "pop_precond"):
        x = normalized_direction(cov, w0)
        if kind == "pop_normalized":
            def f(wb):
                m = float(wb @ u_bar)
                inner = cov.apply(1.0, u_bar - m * wb, check=False)
                return -drift.zeta(m) * _proj(wb, inner)
        else:
            def f(wb):
                m = float(wb @ u_bar)
                return -drift.zeta(m) * (u_bar - m * wb)
        bar_of = lambda wb: float(wb @ u_bar)
        w_of = lambda wb: _unit(cov.apply(-0.5, wb, check=False))
        raw_of = lambda wb: float(w_of(wb) @ u)
        renorm = _unit
    else:
        precond = kind == "emp_precond"

        def renorm(w):
            nrm = sigma_norm(cov_hat, w)
            if not nrm > 0 or not math.isfinite(nrm):
                raise FloatingPointError("state lost its norm")
            return w / nrm

        def f(w):
            grad = empirical_corr_grad(w, dataset, cov_hat, phi_link)[1]
            eta = float(w @ cov_hat.apply(1.0, w))
            return -eta * (cov_hat.apply(-1.0, grad) if precond else grad)

        x = renorm(w0)
        bar_of = lambda w: alignment_bar(w, cov_hat, u, cov)
        raw_of = lambda w: raw_alignment(w, u)
        w_of = lambda w: w

    m0 = bar_of(x)
    t_max = cfg.t_max
    if t_max is None:
        t_max = default_t_max(m0, s, cfg.eps_target, cov.lambda_min,
                              precond=kind in ("pop_precond", "emp_precond"))
        t_max = max(t_max, 2 * cfg.dt)
    n_steps = int(math.ceil(t_max / cfg.dt - 1e-9))
    meta = {"kind": kind, "dt": cfg.dt, "t_max": t_max, "integrator": cfg.integrator,
            "eps_target": cfg.eps_target, "seed": seed, "d": w0.shape[0],
            "g": g.name, "phi": phi_link.name}
    if isinstance(cov, SpikedCovariance):
        meta.update(kappa=cov.kappa, u_theta=float(u @ cov.theta))

    rec = _Recorder(cfg)
    rec.observe(0, 0.0, bar_of(x), raw_of(x), force=True)
    for k in range(1, n_steps + 1):
        t = k * cfg.dt
        try:
            with np.errstate(over="raise", invalid="raise"):
                nxt = renorm(_step(f, x, cfg.dt, cfg.integrator))
            if not np.all(np.isfinite(nxt)):
                raise FloatingPointError("non-finite state")
        except FloatingPointError as exc:
            raise IntegrationDiverged(f"{kind} diverged at t={t:g}: {exc}", rec.trace(w_of(x), meta)) from exc
        x = nxt
        if rec.observe(k, t, bar_of(x), raw_of(x), force=k == n_steps):
            break
    return rec.trace(w_of(x), meta)


# ---------------------------------------------------------------- batched scalar flows


@dataclass
class ScalarBatchResult:
    """Many theta = u scalar flows integrated in lockstep."""

    m0: np.ndarray
    final: np.ndarray
    sup_abs: np.ndarray
    hit_half: np.ndarray  # nan where never reached
    hit_eps: np.ndarray
    t_end: float


def integrate_scalar_batch(rhs, m0, dt, t_max, eps_target=0.01, integrator="rk4", stop_when_all_hit=True):
    """Integrate ``dm/dt = rhs(m)`` for a vector of initial alignments."""
    m = np.array(m0, dtype=float)
    sup = np.abs(m)
    hit_half = np.where(m >= 0.5, 0.0, np.nan)
    hit_eps = np.where(m >= 1 - eps_target, 0.0, np.nan)
    n_steps = int(math.ceil(t_max / dt - 1e-9))
    t = 0.0
    for k in range(1, n_steps + 1):
        t = k * dt
        m = np.clip(_step(rhs, m, dt, integrator), -1.0, 1.0)
        if not np.all(np.isfinite(m)):
            raise IntegrationDiverged(f"scalar flow diverged at t={t:g}")
        np.maximum(sup, np.abs(m), out=sup)
        hit_half[np.isnan(hit_half) & (m >= 0.5)] = t
        hit_eps[np.isnan(hit_eps) & (m >= 1 - eps_target)] = t
        if stop_when_all_hit and not np.any(np.isnan(hit_eps)):
            break
    return ScalarBatchResult(np.asarray(m0, dtype=float), m, sup, hit_half, hit_eps, t)


def with_dt(cfg: FlowConfig, dt) -> FlowConfig:
    return replace(cfg, dt=dt)


def scalar_rhs(kind, kappa, g_series, phi_series="relu"):
    """Vectorized theta = u alignment RHS for ``pop_spherical``, ``pop_normalized``
    or ``pop_precond``, with the drift series precomputed."""
    g, phi = _series(g_series), _series(phi_series)
    drift = _Drift(g, phi)
    if kind == "pop_spherical":
        _require_homogeneous(phi)
        phi_sq = phi.sq_norm if phi.sq_norm is not None else phi.l2_sq()

        def f(m):
            sw = np.sqrt((1.0 + kappa * m * m) / (1.0 + kappa))
            rho = m / sw
            e_dd = -drift.zeta(rho)
            psi_t = (-drift.corr(rho) + e_dd * rho) / sw + phi_sq
            return -(-e_dd + kappa * psi_t * m / (1.0 + kappa)) * (1.0 - m * m)
    elif kind == "pop_normalized":
        def f(m):
            perp = 1.0 - m * m
            return -drift.zeta(m) * perp * (perp + m * m / (1.0 + kappa))
    elif kind == "pop_precond":
        def f(m):
            return -drift.zeta(m) * (1.0 - m * m)
    else:
        raise ValueError(f"no scalar reduction for {kind!r}")
    return f
