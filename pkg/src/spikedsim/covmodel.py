"""Spiked and estimated covariances, geometry construction and data sampling."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .hermite import LinkFunction
from .rng import make_rng

POWERS = (1.0, 0.5, -0.5, -1.0)


def _check_power(power):
    power = float(power)
    if power not in POWERS:
        raise ValueError(f"power must be one of {POWERS}, got {power}")
    return power


def _check_finite(v):
    v = np.asarray(v, dtype=float)
    if not np.isfinite(v).all():
        raise ValueError("non-finite input to covariance action")
    return v


@dataclass(frozen=True)
class SpikedCovariance:
    """``Sigma = (I + kappa theta theta^T) / (1 + kappa)`` with unit ``theta``.

    Eigenvalue 1 along ``theta`` and ``1/(1+kappa)`` on its complement, so
    all matrix powers act in O(d) through the rank-one structure.
    """

    d: int
    kappa: float
    theta: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        if theta.shape != (self.d,):
            raise ValueError(f"theta must have shape ({self.d},)")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        nrm = np.linalg.norm(theta)
        if abs(nrm - 1.0) > 1e-12:
            theta = theta / nrm
        object.__setattr__(self, "theta", theta)

    @property
    def lambda_max(self) -> float:
        return 1.0

    @property
    def lambda_min(self) -> float:
        return 1.0 / (1.0 + self.kappa)

    @property
    def condition_number(self) -> float:
        return 1.0 + self.kappa

    def eigenvalues(self) -> np.ndarray:
        ev = np.full(self.d, self.lambda_min)
        ev[-1] = 1.0
        return ev

    def apply(self, power, v, check: bool = True):
        """``Sigma^power v``; ``v`` may be a vector or an (n, d) batch of rows."""
        if check:
            power = _check_power(power)
            v = _check_finite(v)
        scale = (1.0 + self.kappa) ** (-power)
        lift = (1.0 + self.kappa) ** power - 1.0
        if v.ndim == 1:
            return scale * (v + (lift * float(v @ self.theta)) * self.theta)
        return scale * (v + lift * np.multiply.outer(v @ self.theta, self.theta))

    def dense(self) -> np.ndarray:
        return (np.eye(self.d) + self.kappa * np.outer(self.theta, self.theta)) / (1.0 + self.kappa)


@dataclass(frozen=True)
class GeneralCovariance:
    """Dense symmetric covariance with a floored eigendecomposition cache."""

    matrix: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray
    eig_floor: float

    @classmethod
    def from_matrix(cls, matrix, eig_floor: Optional[float] = None) -> "GeneralCovariance":
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValueError("covariance must be square")
        scale = max(np.max(np.abs(matrix)), 1e-300)
        if np.max(np.abs(matrix - matrix.T)) > 1e-10 * scale:
            raise ValueError("covariance must be symmetric")
        matrix = 0.5 * (matrix + matrix.T)
        if eig_floor is None:
            eig_floor = 1e-10 * max(np.trace(matrix) / matrix.shape[0], 1e-300)
        if eig_floor <= 0:
            raise ValueError("eig_floor must be positive")
        vals, vecs = np.linalg.eigh(matrix)
        return cls(matrix, np.maximum(vals, eig_floor), vecs, float(eig_floor))

    @property
    def d(self) -> int:
        return self.matrix.shape[0]

    @property
    def lambda_max(self) -> float:
        return float(self.eigvals[-1])

    @property
    def lambda_min(self) -> float:
        return float(self.eigvals[0])

    @property
    def condition_number(self) -> float:
        return self.lambda_max / self.lambda_min

    def eigenvalues(self) -> np.ndarray:
        return self.eigvals.copy()

    def apply(self, power, v, check: bool = True):
        if check:
            power = _check_power(power)
            v = _check_finite(v)
        V = self.eigvecs
        return ((v @ V) * self.eigvals**power) @ V.T

    def dense(self) -> np.ndarray:
        return (self.eigvecs * self.eigvals) @ self.eigvecs.T

    def power_matrix(self, power) -> np.ndarray:
        power = _check_power(power)
        return (self.eigvecs * self.eigvals**power) @ self.eigvecs.T


Covariance = Union[SpikedCovariance, GeneralCovariance]


def cov_power_apply(cov: Covariance, power, v):
    """``cov^power v`` for power in {1, 1/2, -1/2, -1}."""
    return cov.apply(power, v)


def sigma_norm(cov: Covariance, w) -> float:
    """``||cov^{1/2} w||``."""
    w = np.asarray(w, dtype=float)
    return float(math.sqrt(max(w @ cov.apply(1.0, w), 0.0)))


def normalized_direction(cov: Covariance, w) -> np.ndarray:
    """``cov^{1/2} w / ||cov^{1/2} w||``."""
    v = cov.apply(0.5, w)
    nrm = np.linalg.norm(v)
    if not nrm > 0:
        raise FloatingPointError("degenerate ||Sigma^{1/2} w||")
    return v / nrm


# -------------------------------------------------------------- geometry


def random_unit(rng: np.random.Generator, d: int) -> np.ndarray:
    while True:
        v = rng.standard_normal(d)
        nrm = np.linalg.norm(v)
        if nrm > 0:
            return v / nrm


def construct_geometry(d: int, r1: float, r2: float, seed):
    """Target ``u``, spike ``theta`` and magnitude ``kappa`` for exponents (r1, r2).

    ``kappa = d^r2`` and ``<u, theta> = d^-r1`` exactly; ``u`` is uniform on
    the sphere and the orthogonal part of ``theta`` is a uniform direction
    in ``u``'s complement.
    """
    if d < 2:
        raise ValueError("d must be >= 2")
    if not 0.0 <= r1 <= 0.5:
        raise ValueError(f"r1 must lie in [0, 1/2], got {r1}")
    if not 0.0 <= r2 <= 1.0:
        raise ValueError(f"r2 must lie in [0, 1], got {r2}")
    rng = make_rng(seed, "geometry", d, r1, r2)
    u = random_unit(rng, d)
    v = rng.standard_normal(d)
    v -= (v @ u) * u
    v /= np.linalg.norm(v)
    c = d ** (-r1)
    theta = c * u + math.sqrt(max(1.0 - c * c, 0.0)) * v
    theta /= np.linalg.norm(theta)
    return u, theta, float(d**r2)


# -------------------------------------------------------------- task / data


@dataclass(frozen=True)
class SingleIndexTask:
    """``y = g(<u, x> / ||Sigma^{1/2} u||) + sigma * xi`` with ``x ~ N(0, Sigma)``."""

    u: np.ndarray
    link: LinkFunction
    noise_sigma: float
    covariance: Covariance

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        object.__setattr__(self, "u", u / np.linalg.norm(u))
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @property
    def d(self) -> int:
        return self.u.shape[0]

    @property
    def u_bar(self) -> np.ndarray:
        return normalized_direction(self.covariance, self.u)

    def index(self, X) -> np.ndarray:
        """Unit-variance index ``<u, x> / ||Sigma^{1/2} u||`` for each row."""
        return (np.asarray(X) @ self.u) / sigma_norm(self.covariance, self.u)


def spiked_task(d, r1, r2, link: LinkFunction, noise_sigma=0.0, seed=0) -> SingleIndexTask:
    u, theta, kappa = construct_geometry(d, r1, r2, seed)
    return SingleIndexTask(u, link, noise_sigma, SpikedCovariance(d, kappa, theta))


@dataclass
class Dataset:
    inputs: np.ndarray
    responses: np.ndarray
    unlabeled: np.ndarray
    seed: object = 0

    def __post_init__(self):
        if self.inputs.shape[0] != self.responses.shape[0]:
            raise ValueError("inputs and responses disagree on n")
        if not np.all(np.isfinite(self.responses)):
            raise ValueError("non-finite responses")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_prime(self) -> int:
        return self.unlabeled.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    def to_csv(self, path):
        """Header row ``d,n,n_prime``; then n labeled rows ``y,x_1..x_d`` and
        n' unlabeled rows ``x_1..x_d``."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["d", "n", "n_prime"])
            w.writerow([self.d, self.n, self.n_prime])
            for y, x in zip(self.responses, self.inputs):
                w.writerow([repr(float(y))] + [repr(float(v)) for v in x])
            for x in self.unlabeled:
                w.writerow([repr(float(v)) for v in x])

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if rows[0] != ["d", "n", "n_prime"]:
            raise ValueError(f"{path}: not a dataset file")
        d, n, n_prime = (int(v) for v in rows[1])
        body = rows[2:]
        if len(body) != n + n_prime:
            raise ValueError(f"{path}: expected {n + n_prime} data rows, found {len(body)}")
        lab = np.array(body[:n], dtype=float).reshape(n, d + 1)
        unl = np.array(body[n:], dtype=float).reshape(n_prime, d)
        return cls(lab[:, 1:], lab[:, 0], unl)


def _gaussian_rows(cov: Covariance, rng, n, d):
    z = rng.standard_normal((n, d))
    return cov.apply(0.5, z) if n else z


def sample_dataset(task: SingleIndexTask, n: int, n_prime: int, seed) -> Dataset:
    """Draw n labeled and n' unlabeled inputs from the task, deterministically per seed.

    Inputs, noise and the unlabeled pool use separate streams, so the sample
    for a smaller n is a prefix of the sample for a larger n.
    """
    if n < 1 or n_prime < 0:
        raise ValueError("need n >= 1 and n_prime >= 0")
    d = task.d
    X = _gaussian_rows(task.covariance, make_rng(seed, "inputs"), n, d)
    y = np.asarray(task.link(task.index(X)), dtype=float)
    if task.noise_sigma > 0:
        y = y + task.noise_sigma * make_rng(seed, "noise").standard_normal(n)
    U = _gaussian_rows(task.covariance, make_rng(seed, "unlabeled"), n_prime, d)
    return Dataset(X, y, U, seed)


def resolve_n_prime(mode, n: int, explicit: Optional[int] = None, cap: Optional[int] = None) -> int:
    """Unlabeled pool size for mode ``same`` (n), ``squared`` (n^2) or ``explicit``."""
    if mode == "same":
        n_prime = n
    elif mode == "squared":
        n_prime = n * n
    elif mode == "explicit":
        if explicit is None:
            raise ValueError("explicit n_prime mode needs a value")
        n_prime = int(explicit)
    else:
        raise ValueError(f"unknown n_prime mode {mode!r}")
    return min(n_prime, cap) if cap else n_prime


def estimate_covariance(unlabeled, eig_floor: Optional[float] = None) -> GeneralCovariance:
    """Second-moment estimate ``(1/n') sum x x^T`` with floored eigenvalues."""
    X = np.asarray(unlabeled, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("need at least one unlabeled sample")
    return GeneralCovariance.from_matrix(X.T @ X / X.shape[0], eig_floor)


def dataset_covariance(ds: Dataset, eig_floor: Optional[float] = None) -> GeneralCovariance:
    """Estimate from the unlabeled pool, falling back to the labeled inputs when it is empty."""
    pool = ds.unlabeled if ds.n_prime else ds.inputs
    return estimate_covariance(pool, eig_floor)


def init_first_layer(d: int, seed, condition_positive: bool = False,
                     cov_hat: Optional[Covariance] = None, u_bar=None) -> np.ndarray:
    """Uniform unit vector on the sphere, optionally sign-flipped so ``<w_bar, u_bar> > 0``."""
    rng = make_rng(seed, "init", d)
    if condition_positive and (cov_hat is None or u_bar is None):
        raise ValueError("conditioning needs cov_hat and u_bar")
    while True:
        w = random_unit(rng, d)
        if not condition_positive:
            return w
        m = float(normalized_direction(cov_hat, w) @ u_bar)
        if m != 0.0:
            return w if m > 0 else -w
