"""Two-layer ReLU network and layer-wise training (direction flow, then ridge)."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .covmodel import (Dataset, SingleIndexTask, dataset_covariance, init_first_layer,
                       resolve_n_prime, sample_dataset, sigma_norm)
from .flows import FlowConfig, FlowTrace, integrate_flow
from .rng import digest, make_rng


class StepSizeUnstable(ValueError):
    pass


def relu(z):
    return np.maximum(z, 0.0)


@dataclass(frozen=True)
class TwoLayerNet:
    """``y_hat(x) = sum_i a_i relu(<w_i, x> + b_i)``."""

    W: np.ndarray
    a: np.ndarray
    b: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.W, dtype=float))
        a = np.asarray(self.a, dtype=float).reshape(-1)
        b = np.asarray(self.b, dtype=float).reshape(-1)
        if not (W.shape[0] == a.size == b.size):
            raise ValueError(f"width mismatch: W {W.shape}, a {a.size}, b {b.size}")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def m(self) -> int:
        return self.a.size

    @property
    def d(self) -> int:
        return self.W.shape[1]

    def features(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.d:
            raise ValueError(f"input dimension {X.shape[-1]} != {self.d}")
        return relu(X @ self.W.T + self.b)

    def with_a(self, a) -> "TwoLayerNet":
        return TwoLayerNet(self.W, a, self.b, dict(self.meta))

    def to_json(self, path=None) -> str:
        doc = {"W": self.W.tolist(), "a": self.a.tolist(), "b": self.b.tolist(), "meta": self.meta}
        text = json.dumps(doc, sort_keys=True, default=str)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_json(cls, text_or_path) -> "TwoLayerNet":
        text = text_or_path
        if not text.lstrip().startswith("{"):
            with open(text_or_path) as fh:
                text = fh.read()
        doc = json.loads(text)
        return cls(np.array(doc["W"]), np.array(doc["a"]), np.array(doc["b"]), doc.get("meta", {}))


def predict(net: TwoLayerNet, x):
    """Forward pass for one input (returns float) or a batch of rows."""
    x = np.asarray(x, dtype=float)
    out = net.features(x) @ net.a
    return float(out) if x.ndim == 1 else out


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class TrainConfig:
    m: int = 256
    Delta: Optional[float] = None  # None: sqrt(ln(n d))
    lam: Optional[float] = None  # None: c_lam (m sigma^2 + m eps + 1)
    c_lam: float = 0.1
    t_prime: Optional[float] = None  # None: ln(1e3) / lam
    stage1_kind: str = "emp_precond"
    stage1: FlowConfig = FlowConfig(dt=0.05, eps_target=0.1)
    stage2_dt: Optional[float] = None  # None: 1 / (lambda_max(G) + lam)
    n: int = 8000
    n_prime_mode: str = "squared"
    n_prime: Optional[int] = None
    n_prime_cap: int = 200_000
    seed: int = 0

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.Delta is not None and not self.Delta > 0:
            raise ValueError("Delta must be positive")
        if self.lam is not None and self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.stage1_kind not in ("emp_normalized", "emp_precond"):
            raise ValueError(f"stage-1 flow must be empirical, got {self.stage1_kind!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def default_delta(n: int, d: int) -> float:
    return math.sqrt(math.log(n * d))


def default_lambda(m: int, sigma: float, eps: float, c_lam: float = 0.1) -> float:
    return c_lam * (m * sigma**2 + m * eps + 1.0)


def default_t_prime(lam: float) -> float:
    return math.log(1e3) / lam


def sample_biases(m: int, Delta: float, seed) -> np.ndarray:
    if not Delta > 0:
        raise ValueError("Delta must be positive")
    return make_rng(seed, "biases", m).uniform(-Delta, Delta, size=m)


# ------------------------------------------------------------------ stage 1


def stage1_train(dataset: Dataset, task: SingleIndexTask, config: TrainConfig, cov_hat=None):
    """Recover one direction with the empirical flow; returns (direction, trace).

    The direction is scaled so that ``||Sigma_hat^{1/2} dir|| = 1``.
    """
    cov_hat = dataset_covariance(dataset) if cov_hat is None else cov_hat
    w0 = init_first_layer(dataset.d, config.seed, True, cov_hat, task.u_bar)
    # the stage-1 Euler step is quoted in units of 1 / lambda_max(Sigma_hat)
    cfg = replace(config.stage1, dt=config.stage1.dt / cov_hat.lambda_max)
    trace = integrate_flow(config.stage1_kind, w0, dataset, cfg, cov_hat=cov_hat, task=task,
                           seed=config.seed)
    w = trace.final_w
    return w / sigma_norm(cov_hat, w), trace


# ------------------------------------------------------------------ stage 2


def ridge_closed_form(Phi, y, lam) -> np.ndarray:
    """``(Phi^T Phi / n + lam I)^{-1} Phi^T y / n``."""
    Phi = np.asarray(Phi, dtype=float)
    n, m = Phi.shape
    G = Phi.T @ Phi / n
    c = Phi.T @ np.asarray(y, dtype=float) / n
    if lam == 0:
        return np.linalg.lstsq(G, c, rcond=None)[0]
    return np.linalg.solve(G + lam * np.eye(m), c)


def ridge_objective(Phi, y, a, lam) -> float:
    r = Phi @ a - y
    return 0.5 * float(r @ r) / len(y) + 0.5 * lam * float(a @ a)


@dataclass
class Stage2Result:
    a: np.ndarray
    a_star: np.ndarray
    objective: np.ndarray  # ridge objective at the Euler iterates listed in objective_steps
    objective_steps: np.ndarray
    dt: float
    steps: int


def stage2_train(net: TwoLayerNet, dataset: Dataset, lam: float, t_prime: float,
                 dt: Optional[float] = None, method: str = "spectral",
                 keep_objective: bool = True) -> Stage2Result:
    """Euler-discretized ridge gradient flow from ``a^0 = 1/m``.

    The iteration ``a <- a - dt((G + lam I) a - c)`` is linear, so its k-th
    iterate is ``a* + (I - dt(G + lam I))^k (a^0 - a*)``.  ``method='spectral'``
    evaluates that power in the eigenbasis of G (the same iterates at O(m^3)
    cost); ``method='loop'`` performs the steps one by one.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if method not in ("spectral", "loop"):
        raise ValueError(f"unknown stage-2 method {method!r}")
    Phi = net.features(dataset.inputs)
    y = dataset.responses
    n, m = Phi.shape
    G = Phi.T @ Phi / n
    c = Phi.T @ y / n
    mu, V = np.linalg.eigh(G)
    mu = np.maximum(mu, 0.0)
    lmax = float(mu[-1])
    if dt is None:
        dt = 1.0 / (lmax + lam)
    if dt * (lmax + lam) >= 2.0:
        raise StepSizeUnstable(f"dt={dt:g} with lambda_max(G)+lambda={lmax + lam:g} is unstable (need < 2)")
    steps = max(1, int(math.ceil(t_prime / dt - 1e-9)))
    a0 = np.full(m, 1.0 / m)
    yy = float(y @ y) / n

    def objective(a):
        return 0.5 * (float(a @ G @ a) - 2 * float(c @ a) + yy) + 0.5 * lam * float(a @ a)

    if method == "loop":
        A = np.eye(m) - dt * (G + lam * np.eye(m))
        a, obj = a0, [objective(a0)]
        for _ in range(steps):
            a = A @ a + dt * c
            if keep_objective:
                obj.append(objective(a))
        ks = np.arange(len(obj))
        a_star = ridge_closed_form(Phi, y, lam)
        return Stage2Result(a, a_star, np.array(obj), ks, dt, steps)

    cb = V.T @ c
    with np.errstate(divide="ignore", invalid="ignore"):
        star_b = np.where(mu + lam > 0, cb / (mu + lam), 0.0)
    a_star = V @ star_b
    e0 = V.T @ a0 - star_b
    r = 1.0 - dt * (mu + lam)
    # directions with mu + lam = 0 never move; r = 1 there keeps them fixed
    a = V @ (star_b + r**steps * e0)
    obj, ks = [], np.array([], dtype=int)
    if keep_objective:
        ks = np.unique(np.concatenate([np.arange(min(steps, 200) + 1),
                                       np.geomspace(1, steps, 200).astype(int), [steps]]))
        f_star = objective(a_star)
        obj = [f_star + 0.5 * float(np.sum((mu + lam) * (r**k * e0) ** 2)) for k in ks]
    return Stage2Result(a, a_star, np.array(obj), ks, dt, steps)


# ------------------------------------------------------------------ full pipeline


def test_risk(net: TwoLayerNet, task: SingleIndexTask, n_test: int, seed) -> float:
    """Monte-Carlo squared error on fresh noisy samples."""
    if n_test < 1:
        raise ValueError("n_test must be >= 1")
    ds = sample_dataset(task, n_test, 0, ("test", seed))
    r = predict(net, ds.inputs) - ds.responses
    return float(np.mean(r * r))


@dataclass
class PipelineResult:
    net: TwoLayerNet
    trace: FlowTrace
    alignment: float
    lam: float
    Delta: float
    t_prime: float
    stage2: Stage2Result


def train_algorithm1(task: SingleIndexTask, config: TrainConfig, dataset: Optional[Dataset] = None,
                     keep_objective: bool = False) -> PipelineResult:
    """Direction flow, row normalization, random biases and ridge second layer."""
    if dataset is None:
        n_prime = resolve_n_prime(config.n_prime_mode, config.n, config.n_prime, config.n_prime_cap)
        dataset = sample_dataset(task, config.n, n_prime, ("data", config.seed))
    cov_hat = dataset_covariance(dataset)
    direction, trace = stage1_train(dataset, task, config, cov_hat)
    m, d = config.m, dataset.d
    W = np.tile(direction, (m, 1))
    Delta = config.Delta if config.Delta is not None else default_delta(dataset.n, d)
    lam = config.lam if config.lam is not None else default_lambda(
        m, task.noise_sigma, config.stage1.eps_target, config.c_lam)
    t_prime = config.t_prime if config.t_prime is not None else default_t_prime(lam)
    b = sample_biases(m, Delta, config.seed)
    meta = {"seed": config.seed, "config_digest": digest(config.to_dict())}
    net = TwoLayerNet(W, np.full(m, 1.0 / m), b, meta)
    st2 = stage2_train(net, dataset, lam, t_prime, config.stage2_dt, keep_objective=keep_objective)
    return PipelineResult(net.with_a(st2.a), trace, trace.final_alignment, lam, Delta, t_prime, st2)
