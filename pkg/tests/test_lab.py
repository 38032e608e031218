import json
import math

import numpy as np
import pytest

from spikedsim import lab as L


def _square(p):
    return [{"x": p["x"], "y": p["x"] ** 2}]


def test_spec_validation():
    with pytest.raises(L.ConfigError):
        L.ExperimentSpec.from_dict({"experiment": "nonsense", "grid": {"a": 1}})
    with pytest.raises(L.ConfigError):
        L.ExperimentSpec.from_dict({"experiment": "tau_scaling", "grid": {}})
    with pytest.raises(L.ConfigError):
        L.ExperimentSpec.from_dict({"experiment": "tau_scaling", "grid": {"dt": 0.1}, "success_prob": 0})
    with pytest.raises(L.ConfigError):
        L.ExperimentSpec.from_dict({"experiment": "tau_scaling", "grid": {"dt": 0.1}, "colour": "red"})
    spec = L.ExperimentSpec.from_dict({"experiment": "tau_scaling", "grid": {"dt": 0.1}, "seeds": 3})
    assert spec.seeds == [0, 1, 2]
    assert L.ExperimentSpec.from_dict(spec.to_dict()) == spec


def test_fit_line_exact_and_agrees():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    fit = L.fit_line(x, 2 * x + 1)
    assert fit.slope == pytest.approx(2.0) and fit.intercept == pytest.approx(1.0)
    assert fit.se == pytest.approx(0.0, abs=1e-12)
    assert fit.agrees(2.05, 0.1) and not fit.agrees(2.2, 0.1)
    noisy = L.LinearFit(2.0, 0.0, 0.2, 0.9, 3)
    # point estimate on target, but too uncertain to count
    assert not noisy.agrees(2.0, 0.1)
    ll = L.fit_loglog([10, 100, 1000], [1 / math.sqrt(10), 0.1, 1 / math.sqrt(1000)])
    assert ll.slope == pytest.approx(-0.5)
    with pytest.raises(ValueError):
        L.fit_line([1.0], [1.0])


def test_csv_cells_roundtrip(tmp_path):
    res = L.SweepResult("x", ["a", "b", "c", "d", "e"],
                        [{"a": 0.1 + 0.2, "b": True, "c": None, "d": 7, "e": "hermite:2"}])
    path = tmp_path / "r.csv"
    res.to_csv(path)
    (row,) = L.read_rows(path)
    assert row == {"a": 0.1 + 0.2, "b": True, "c": None, "d": 7, "e": "hermite:2"}


def test_run_items_resume_and_workers():
    items = [{"x": i} for i in range(5)]
    rows, timings = L.run_items(_square, items)
    assert [r["y"] for r in rows] == [0, 1, 4, 9, 16]
    assert len(timings) == 5
    par, _ = L.run_items(_square, items, workers=2)
    assert par == rows
    resumed, t2 = L.run_items(_square, items, prior_rows=rows[:3])
    assert resumed == rows
    assert len(t2) == 2
    with pytest.raises(ValueError):
        L.run_items(_square, items, workers=0)


def test_regimes_and_exponents():
    assert L.regime(0.3, 0.1) == "weak_spike"
    assert L.regime(0.3, 0.45) == "intermediate"
    assert L.regime(0.1, 0.8) == "strong_spike"
    assert L.regime(0.25, 0.5) == "boundary"
    assert L.regime(0.3, 0.3) == "boundary"
    assert L.predicted_exponent(0.25, 0.5, 2, True) is None
    assert L.predicted_exponent(0.0, 1.0, 2, False) == pytest.approx(3.0)
    assert L.predicted_exponent(0.0, 1.0, 2, True) == pytest.approx(1.0)
    assert L.predicted_exponent(0.3, 0.45, 3, True) == pytest.approx(1 + 2 * 0.7)
    assert L.predicted_exponent(0.3, 0.1, 3, False) == pytest.approx(1 + 0.2 + 2)
    assert L.predicted_init_slope(0.5, 0.1) == -0.5
    assert L.predicted_init_slope(0.4, 0.6) == pytest.approx(-0.3)
    assert L.predicted_init_slope(0.1, 0.8) == pytest.approx(-0.1)


def test_geometric_search_finds_threshold():
    for thr in (16, 17, 100, 1000, 5000):
        n, probes = L._geometric_search(lambda n: n >= thr, 16, 1 << 17, 1.1)
        assert thr <= n <= 1.1 * thr + 1
        assert probes < 30
    assert L._geometric_search(lambda n: False, 16, 256)[0] is None


def test_aggregate_n_star():
    assert L.aggregate_n_star([10, 20, 30, 40, None], 0.6) == 30
    assert L.aggregate_n_star([10, None, None], 0.7) is None
    assert L.aggregate_n_star([5], 1.0) == 5


def test_sphere_marginal_common_numbers():
    m1, _ = L.sphere_marginal(100, 3)
    m2, _ = L.sphere_marginal(100, 3)
    assert m1 == m2
    ms = np.array([L.sphere_marginal(400, s)[0] for s in range(2000)])
    # E[m^2] = 1/d for a uniform point on the sphere
    assert np.mean(ms**2) * 400 == pytest.approx(1.0, abs=0.1)
    bounded = [L.sphere_marginal(100, s, bound=1.0)[0] for s in range(50)]
    assert max(bounded) * 10 <= 1.0


def test_theorem1_config_checks():
    with pytest.raises(L.ConfigError):
        L.run_theorem1_demo([100], g="hermite:2")
    with pytest.raises(L.ConfigError):
        L.run_theorem1_demo([100], g="hermite:4", kappa_exponent=0.9)
    with pytest.raises(L.ConfigError):
        L.run_theorem1_demo([100], phi="tanh")
    with pytest.raises(L.ConfigError):
        L.run_large_spike([100], g="hermite:3")


def test_sign_corrected_contrast():
    # beta_4 of relu is negative, alpha_4 of h_4 is one
    assert L._sign_corrected_phi("hermite:4", "relu", 4) == "neg:relu"
    assert L._sign_corrected_phi("hermite:2", "relu", 2) == "relu"


def test_small_theorem1_run_shape():
    res = L.run_theorem1_demo([100, 400], seeds=range(3), t_max=50.0)
    assert len(res.rows) == 6
    assert res.summary["all_within_bound"]
    assert res.summary["never_exceeds_initial"]


def test_init_alignment_needs_seeds_and_phase_needs_three_d():
    with pytest.raises(L.ConfigError):
        L.init_alignment_stats([64, 256], 0.5, 0.1, seeds=range(10))
    with pytest.raises(L.ConfigError):
        L.phase_diagram([16, 32], [0.0], [1.0])


def test_stein_isserlis_oracle():
    rho = 0.6
    w = np.array([1.0, 0.0, 0.0])
    u = np.array([rho, math.sqrt(1 - rho**2), 0.0])
    out = L.stein_check("square", "identity", w, u, n_mc=400_000, seed=1)
    assert out["max_ratio"] <= 4.0
    # E[a^2 b z] = u + 2 rho w
    expect = u + 2 * rho * w
    assert np.all(np.abs(out["lhs"] - expect) < 5 * np.sqrt(15.0 / 400_000))


def test_stein_rejects_non_unit():
    with pytest.raises(ValueError):
        L.stein_check("relu", "relu", np.ones(3), np.array([1.0, 0, 0]), n_mc=10)


def test_run_experiment_files_and_resume(tmp_path):
    spec = L.ExperimentSpec.from_dict({"experiment": "tau_scaling",
                                       "grid": {"s_list": [3], "m0_list": [0.1, 0.2, 0.3], "dt": 0.02}})
    docs = L.run_experiment(spec, tmp_path)
    csv1 = (tmp_path / "tau_scaling.csv").read_bytes()
    json1 = (tmp_path / "tau_scaling.json").read_bytes()
    assert "tau_scaling" in docs
    assert json.loads(json1)["experiment"] == "tau_scaling"
    assert (tmp_path / "tau_scaling.timing.csv").exists()
    L.run_experiment(spec, tmp_path, resume=True)
    assert (tmp_path / "tau_scaling.csv").read_bytes() == csv1
    assert (tmp_path / "tau_scaling.json").read_bytes() == json1


def test_run_experiment_rejects_unknown_grid_key(tmp_path):
    spec = L.ExperimentSpec.from_dict({"experiment": "tau_scaling", "grid": {"banana": 1}})
    with pytest.raises(L.ConfigError):
        L.run_experiment(spec, tmp_path)


def test_phase_diagram_predicted_cells():
    assert L.predicted_exponent(0.0, 1.0, 3, precond=True) == pytest.approx(1.0)
    assert L.predicted_exponent(0.4, 0.2, 3, precond=False) == pytest.approx(1 + 0.4 + 2)
    for r1, r2 in [(0.4, 0.2), (0.5, 0.0), (0.3, 0.1)]:
        assert L.predicted_exponent(r1, r2, 3, precond=True) == pytest.approx(3.0)


def test_stein_identity_links_orthogonal():
    w, u = np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
    out = L.stein_check("identity", "identity", w, u, n_mc=200_000, seed=0)
    assert np.all(np.abs(out["lhs"]) < 5 * np.sqrt(3.0 / 200_000))
    assert out["max_ratio"] <= 4.0


def test_stein_isserlis_rho_zero_d2():
    w, u = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    n = 400_000
    out = L.stein_check("square", "identity", w, u, n_mc=n, seed=0)
    # component-wise sd: E[a^4 b^2 z_k^2] <= 15
    assert np.all(np.abs(out["lhs"] - u) < 5 * np.sqrt(15.0 / n))


def test_sample_complexity_identity_link_monotone_in_d():
    # kappa = d^0 = 1 is the nearest spiked geometry to isotropic
    n16 = L.probe_sample_complexity(L.ProbeSetup(16, 0.0, 0.0, "identity", 0.0, "emp_precond", 0.1),
                                    range(10), 0.7, (16, 1 << 14))
    n32 = L.probe_sample_complexity(L.ProbeSetup(32, 0.0, 0.0, "identity", 0.0, "emp_precond", 0.1),
                                    range(10), 0.7, (16, 1 << 14))
    assert n16 <= 10_000
    assert n32 >= n16


def test_infeasible_bracket():
    setup = L.ProbeSetup(16, 0.0, 0.0, "hermite:3", 0.0, "emp_precond", 0.01)
    with pytest.raises(L.InfeasibleBracket):
        L.probe_sample_complexity(setup, range(2), 0.7, (16, 32))


def test_full_pipeline_m256_noise_floor():
    res = L.run_full_pipeline(m_list=(256,), c_lam=0.001, eps=0.001, seeds=range(5))
    (cell,) = res.summary.values()
    assert cell["median_risk"] <= 0.1**2 + 0.15
    assert cell["median_excess"] <= 0.1
