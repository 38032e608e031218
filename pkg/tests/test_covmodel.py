import math

import numpy as np
import pytest

from spikedsim import covmodel as C
from spikedsim.hermite import get_link
from spikedsim.rng import make_rng


def _spiked(d=12, kappa=7.0, seed=3):
    rng = np.random.default_rng(seed)
    return C.SpikedCovariance(d, kappa, C.random_unit(rng, d))


def test_spiked_eigen_structure():
    cov = _spiked()
    ev = np.linalg.eigvalsh(cov.dense())
    assert np.allclose(np.sort(ev), np.sort(cov.eigenvalues()), atol=1e-12)
    assert cov.lambda_max == 1.0
    assert cov.condition_number == pytest.approx(8.0)
    assert np.allclose(cov.apply(1.0, cov.theta), cov.theta)


@pytest.mark.parametrize("power", [1.0, 0.5, -0.5, -1.0])
def test_spiked_powers_match_dense(power):
    cov = _spiked()
    vals, vecs = np.linalg.eigh(cov.dense())
    M = (vecs * vals**power) @ vecs.T
    rng = np.random.default_rng(1)
    v = rng.standard_normal(cov.d)
    B = rng.standard_normal((5, cov.d))
    assert np.allclose(cov.apply(power, v), M @ v, atol=1e-12)
    assert np.allclose(cov.apply(power, B), B @ M, atol=1e-12)


def test_half_powers_compose():
    cov = _spiked()
    v = np.arange(cov.d, dtype=float)
    assert np.allclose(cov.apply(0.5, cov.apply(0.5, v)), cov.apply(1.0, v))
    assert np.allclose(cov.apply(-1.0, cov.apply(1.0, v)), v)


def test_bad_power_and_nonfinite():
    cov = _spiked()
    with pytest.raises(ValueError):
        cov.apply(2.0, np.ones(cov.d))
    bad = np.ones(cov.d)
    bad[0] = np.nan
    with pytest.raises(ValueError):
        cov.apply(1.0, bad)


def test_general_covariance_matches_dense():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((6, 6))
    S = A @ A.T + 0.1 * np.eye(6)
    cov = C.GeneralCovariance.from_matrix(S)
    v = rng.standard_normal(6)
    assert np.allclose(cov.apply(1.0, v), S @ v)
    assert np.allclose(cov.apply(-1.0, S @ v), v)
    assert np.allclose(cov.power_matrix(0.5) @ cov.power_matrix(0.5), S)


def test_general_covariance_floor_and_symmetry():
    S = np.diag([1.0, 0.0])
    cov = C.GeneralCovariance.from_matrix(S, eig_floor=1e-6)
    assert cov.lambda_min == 1e-6
    with pytest.raises(ValueError):
        C.GeneralCovariance.from_matrix(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        C.GeneralCovariance.from_matrix(np.eye(2), eig_floor=0.0)


def test_sigma_norm_and_direction():
    cov = _spiked()
    w = np.linspace(-1, 1, cov.d)
    assert C.sigma_norm(cov, w) == pytest.approx(math.sqrt(w @ cov.dense() @ w))
    assert np.linalg.norm(C.normalized_direction(cov, w)) == pytest.approx(1.0)


@pytest.mark.parametrize("d,r1,r2", [(64, 0.0, 1.0), (100, 0.25, 0.5), (50, 0.5, 0.0)])
def test_geometry_exact_overlap(d, r1, r2):
    u, theta, kappa = C.construct_geometry(d, r1, r2, seed=4)
    assert np.linalg.norm(u) == pytest.approx(1.0)
    assert np.linalg.norm(theta) == pytest.approx(1.0)
    assert u @ theta == pytest.approx(d ** (-r1), abs=1e-12)
    assert kappa == pytest.approx(d**r2)


def test_geometry_deterministic_and_ranges():
    a = C.construct_geometry(20, 0.1, 0.3, seed=9)
    b = C.construct_geometry(20, 0.1, 0.3, seed=9)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    for bad in [(20, 0.6, 0.3), (20, 0.1, 1.2), (1, 0.0, 0.0)]:
        with pytest.raises(ValueError):
            C.construct_geometry(*bad, seed=0)


def test_u_bar_closed_form():
    task = C.spiked_task(40, 0.0, 1.0, get_link("hermite:2"), seed=1)
    # theta = u: u is an eigenvector, so u_bar = u
    assert np.allclose(task.u_bar, task.u)
    assert np.linalg.norm(task.u_bar) == pytest.approx(1.0)


def test_index_has_unit_variance():
    task = C.spiked_task(30, 0.2, 0.7, get_link("hermite:2"), seed=2)
    ds = C.sample_dataset(task, 40000, 0, seed=5)
    z = task.index(ds.inputs)
    assert abs(z.var() - 1.0) < 0.03
    assert abs(z.mean()) < 0.02


def test_sample_covariance_converges():
    task = C.spiked_task(10, 0.0, 0.5, get_link("relu"), seed=2)
    ds = C.sample_dataset(task, 1, 100000, seed=0)
    est = C.dataset_covariance(ds)
    assert np.max(np.abs(est.dense() - task.covariance.dense())) < 0.03


def test_dataset_determinism_and_prefix():
    task = C.spiked_task(8, 0.1, 0.4, get_link("hermite:3"), noise_sigma=0.2, seed=0)
    a = C.sample_dataset(task, 50, 30, seed=7)
    b = C.sample_dataset(task, 50, 30, seed=7)
    c = C.sample_dataset(task, 20, 10, seed=7)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.responses, b.responses)
    # prefix property; batched matmul may differ in the last bit across shapes
    assert np.allclose(c.inputs, a.inputs[:20], rtol=0, atol=1e-13)
    assert np.allclose(c.responses, a.responses[:20], rtol=0, atol=1e-12)
    assert np.allclose(c.unlabeled, a.unlabeled[:10], rtol=0, atol=1e-13)
    other = C.sample_dataset(task, 50, 30, seed=8)
    assert not np.array_equal(other.inputs, a.inputs)


def test_noiseless_responses_are_link_of_index():
    task = C.spiked_task(8, 0.0, 0.0, get_link("cube"), seed=0)
    ds = C.sample_dataset(task, 100, 0, seed=1)
    assert np.allclose(ds.responses, task.index(ds.inputs) ** 3)


def test_dataset_csv_roundtrip(tmp_path):
    task = C.spiked_task(5, 0.0, 0.5, get_link("relu"), noise_sigma=0.1, seed=0)
    ds = C.sample_dataset(task, 13, 7, seed=3)
    path = tmp_path / "ds.csv"
    ds.to_csv(path)
    back = C.Dataset.from_csv(path)
    assert np.array_equal(back.inputs, ds.inputs)
    assert np.array_equal(back.responses, ds.responses)
    assert np.array_equal(back.unlabeled, ds.unlabeled)
    ds2 = tmp_path / "ds2.csv"
    back.to_csv(ds2)
    assert path.read_bytes() == ds2.read_bytes()


def test_dataset_csv_rejects_truncated(tmp_path):
    task = C.spiked_task(5, 0.0, 0.5, get_link("relu"), seed=0)
    path = tmp_path / "ds.csv"
    C.sample_dataset(task, 4, 2, seed=3).to_csv(path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(ValueError):
        C.Dataset.from_csv(path)


def test_resolve_n_prime():
    assert C.resolve_n_prime("same", 10) == 10
    assert C.resolve_n_prime("squared", 10) == 100
    assert C.resolve_n_prime("squared", 1000, cap=5000) == 5000
    assert C.resolve_n_prime("explicit", 10, explicit=3) == 3
    with pytest.raises(ValueError):
        C.resolve_n_prime("explicit", 10)
    with pytest.raises(ValueError):
        C.resolve_n_prime("cubed", 10)


def test_init_is_uniform_and_sign_balanced():
    d = 16
    task = C.spiked_task(d, 0.0, 0.5, get_link("relu"), seed=0)
    signs = [np.sign(C.init_first_layer(d, s) @ task.u) for s in range(400)]
    frac = np.mean(np.array(signs) > 0)
    # binomial(400, 1/2): sd 0.025
    assert abs(frac - 0.5) < 0.1
    for s in range(20):
        w = C.init_first_layer(d, s, condition_positive=True, cov_hat=task.covariance, u_bar=task.u_bar)
        assert C.normalized_direction(task.covariance, w) @ task.u_bar > 0
        assert np.linalg.norm(w) == pytest.approx(1.0)


def test_init_conditioning_needs_covariance():
    with pytest.raises(ValueError):
        C.init_first_layer(4, 0, condition_positive=True)


def test_rng_streams_are_keyed():
    a = make_rng(1, "x").standard_normal(3)
    b = make_rng(1, "x").standard_normal(3)
    c = make_rng(1, "y").standard_normal(3)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_power_examples():
    rng = np.random.default_rng(0)
    theta = C.random_unit(rng, 6)
    cov = C.SpikedCovariance(6, 3.0, theta)
    v = rng.standard_normal(6)
    v -= (v @ theta) * theta
    assert np.allclose(cov.apply(-0.5, v), 2 * v, atol=1e-14)
    ident = C.SpikedCovariance(6, 0.0, theta)
    for p in C.POWERS:
        assert np.allclose(ident.apply(p, v), v, atol=1e-15)


@pytest.mark.parametrize("d", [2, 17, 50])
def test_spiked_vs_dense_up_to_50(d):
    rng = np.random.default_rng(d)
    cov = C.SpikedCovariance(d, 9.0, C.random_unit(rng, d))
    dense = (np.eye(d) + 9.0 * np.outer(cov.theta, cov.theta)) / 10.0
    vals, vecs = np.linalg.eigh(dense)
    v = rng.standard_normal(d)
    for p in C.POWERS:
        assert np.max(np.abs(cov.apply(p, v) - (vecs * vals**p) @ vecs.T @ v)) < 1e-10


def test_geometry_closed_cases():
    u, theta, _ = C.construct_geometry(30, 0.0, 0.5, seed=1)
    assert np.allclose(theta, u, atol=1e-15)
    u, theta, _ = C.construct_geometry(100, 0.5, 0.5, seed=1)
    assert u @ theta == pytest.approx(0.1, abs=1e-12)


def test_identity_link_response_is_whitened_alignment():
    task = C.spiked_task(7, 0.2, 0.6, get_link("identity"), seed=3)
    ds = C.sample_dataset(task, 50, 0, seed=2)
    expect = task.covariance.apply(-0.5, ds.inputs) @ task.u_bar
    assert np.allclose(ds.responses, expect, atol=1e-12)


def test_index_variance_within_three_over_root_n():
    n = 100_000
    task = C.spiked_task(20, 0.1, 0.8, get_link("relu"), seed=0)
    z = task.index(C.sample_dataset(task, n, 0, seed=11).inputs)
    assert abs(z.var() - 1.0) <= 3 / math.sqrt(n)


def test_identity_sample_covariance_op_norm():
    n, d = 100_000, 5
    task = C.SingleIndexTask(np.eye(d)[0], get_link("relu"), 0.0, C.SpikedCovariance(d, 0.0, np.eye(d)[1]))
    X = C.sample_dataset(task, n, 0, seed=4).inputs
    assert np.linalg.norm(X.T @ X / n - np.eye(d), 2) <= 5 * math.sqrt(d / n)


def test_estimate_covariance_examples():
    est = C.estimate_covariance(np.array([[2.0]]))
    assert est.dense()[0, 0] == pytest.approx(4.0)
    with pytest.raises(ValueError):
        C.estimate_covariance(np.zeros((0, 3)))
    rng = np.random.default_rng(0)
    X = rng.standard_normal((30, 4))
    est = C.estimate_covariance(X)
    assert np.all(est.eigenvalues() >= est.eig_floor)
    M = est.matrix
    assert np.linalg.norm(est.dense() - M, 2) <= 1e-8 * np.linalg.norm(M, 2)


def test_estimated_whitening_error():
    d, n_prime = 2, 100_000
    worst = 0.0
    for seed in range(20):
        theta = C.random_unit(np.random.default_rng(seed), d)
        task = C.SingleIndexTask(theta, get_link("relu"), 0.0, C.SpikedCovariance(d, 3.0, theta))
        est = C.dataset_covariance(C.sample_dataset(task, 1, n_prime, seed=seed))
        M = np.eye(d) - est.power_matrix(-0.5) @ _sqrtm(task.covariance.dense())
        worst = max(worst, np.linalg.norm(M, 2))
    assert worst <= 10 * math.sqrt(d / n_prime)


def _sqrtm(S):
    vals, vecs = np.linalg.eigh(S)
    return (vecs * np.sqrt(vals)) @ vecs.T


def test_init_sign_over_ten_thousand_seeds():
    d = 8
    u = np.eye(d)[0]
    pos = sum(C.init_first_layer(d, s) @ u > 0 for s in range(10_000))
    assert abs(pos / 10_000 - 0.5) <= 0.05


def test_init_second_moment():
    d = 1000
    u = C.random_unit(np.random.default_rng(0), d)
    vals = np.array([(C.init_first_layer(d, s) @ u) ** 2 for s in range(4000)])
    # E = 1/d, sd of the mean = sqrt(2/(d^2 N))
    assert abs(vals.mean() - 1 / d) < 4 * math.sqrt(2 / 4000) / d
