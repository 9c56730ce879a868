import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vortexlab.core import (Atom, CirculationLaw, GaussianDensity, GaussianVortex, SimConfig,
                            VortexEnsemble, VorticityField, lift_vorticity, rng_stream)
from vortexlab.diagnostics import (CATALOGUE_VERSION, MartingaleTest, TEST_FUNCTIONS,
                                   chaos_defect_2, chaos_metrics, empirical_vorticity,
                                   entropy_balance, fit_variance_slope, functional_report,
                                   ito_reduced_residual, martingale_residual, typical_vorticity)
from vortexlab.estimators import KdeSpec, centered_geometry, gaussian_entropy
from vortexlab.sde import IntegratorSpec, TrajectoryStore, run_interacting

LAW = lift_vorticity(GaussianVortex(1.0, 1.0))
SIGNED = CirculationLaw((Atom(1.0, 0.5, GaussianDensity(1.0, (-1, 0))),
                         Atom(-1.0, 0.5, GaussianDensity(1.0, (1, 0)))))


def gaussian_ensemble(n, seed, m=None):
    x = rng_stream(seed, 9).standard_normal((n, 2))
    return VortexEnsemble(np.ones(n) if m is None else m, x)


class TestVorticityEstimates:
    def test_empirical_mass_is_mean_circulation(self):
        e = gaussian_ensemble(500, 0, np.where(np.arange(500) < 200, -1.0, 0.5))
        w = empirical_vorticity(e, KdeSpec(shape=64))
        assert w.kind == "signed"
        assert w.integral() == pytest.approx(np.mean(e.circulations), abs=1e-12)

    def test_typical_first_marginal_pools_replicas(self):
        reps = [gaussian_ensemble(100, s) for s in range(3)]
        spec = KdeSpec(0.3, geometry=centered_geometry(6.0, 48))
        w1 = typical_vorticity(reps, 1, spec)
        pooled = np.mean([empirical_vorticity(r, spec).values for r in reps], axis=0)
        np.testing.assert_allclose(w1.values, pooled, atol=1e-14)

    def test_typical_second_marginal(self, caplog):
        reps = [gaussian_ensemble(10, s) for s in range(60)]
        w2 = typical_vorticity(reps, 2, KdeSpec(shape=64))
        assert w2.geometry.shape == (32,) * 4
        assert w2.integral() == pytest.approx(1.0, abs=1e-12)
        typical_vorticity(reps[:10], 2, KdeSpec(shape=16))
        assert "only 10 replicas" in caplog.text

    def test_typical_validation(self):
        with pytest.raises(ValueError):
            typical_vorticity([gaussian_ensemble(10, 0)], 1)
        with pytest.raises(ValueError):
            typical_vorticity([gaussian_ensemble(10, 0)] * 2, 3)


class TestChaos:
    def test_defect_small_for_independent_pairs(self):
        x = rng_stream(1, 9).standard_normal((20_000, 4))
        assert chaos_defect_2(x) < 0.2

    def test_defect_large_for_dependent_pairs(self):
        x = rng_stream(1, 9).standard_normal((20_000, 2))
        dup = np.hstack([x, x + 0.05 * rng_stream(2, 9).standard_normal((20_000, 2))])
        assert chaos_defect_2(dup) > 1.0

    def test_defect_decreases_with_samples(self):
        vals = [chaos_defect_2(rng_stream(3, 9).standard_normal((n, 4))) for n in (1000, 4000, 16_000)]
        assert vals[0] > vals[1] > vals[2]

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 1000))
    def test_defect_bounded_by_two(self, seed):
        x = np.random.default_rng(seed).normal(size=(300, 4))
        assert 0 <= chaos_defect_2(x, KdeSpec(shape=12)) <= 2 + 1e-9

    def test_pair_grid_must_be_symmetric(self):
        from vortexlab.core import GridGeometry
        g = GridGeometry.from_bounds([(-3, 3), (-3, 3), (-4, 4), (-3, 3)], (8,) * 4)
        with pytest.raises(ValueError):
            chaos_defect_2(np.zeros((10, 4)), KdeSpec(0.5, geometry=g))

    def test_metrics_consistency(self):
        field = VorticityField.from_function(GaussianVortex(1.0, 1.0), 64, 16.0)
        reps = [gaussian_ensemble(2000, s) for s in range(3)]
        rep = chaos_metrics(reps, field)
        assert rep.n_replicas == 3 and rep.n_pairs == 3000
        assert rep.l1_empirical_vs_pde == pytest.approx(np.mean(rep.l1_per_replica))
        assert rep.l1_empirical_vs_pde < 0.2
        assert rep.cov_test < 5 * rep.cov_stderr
        assert set(rep.to_dict()) >= {"l1_empirical_vs_pde", "chaos_defect_2", "cov_test"}

    def test_metrics_time_checks(self):
        field = VorticityField.from_function(GaussianVortex(1.0, 1.0), 32, 16.0, time=0.5)
        with pytest.raises(ValueError, match="time"):
            chaos_metrics([gaussian_ensemble(100, 0)], field)
        e1 = VortexEnsemble(np.ones(3), np.zeros((3, 2)), 0.5)
        e2 = VortexEnsemble(np.ones(3), np.zeros((3, 2)), 0.6)
        with pytest.raises(ValueError):
            chaos_metrics([e1, e2], field)


class TestEntropyBalance:
    def test_brownian_cloud(self):
        # drift-free motion of N(0, I): H = -log(2 pi e (1 + sigma^2 t)), nu int I = log(1 + sigma^2 t)
        cfg = SimConfig(n_particles=20_000, sigma=1.0, dt=0.05, t_end=0.5, seed=1,
                        save_times=(0.0, 0.1, 0.2, 0.3, 0.4, 0.5))
        store = run_interacting(LAW, cfg, IntegratorSpec.from_config(cfg, drift_backend="none"))
        bal = entropy_balance(store, cfg.nu, KdeSpec(shape=128))
        assert bal.residual < 0.03
        drop = bal.H_path[0] - bal.H_path[-1]
        assert drop == pytest.approx(math.log(1.5), abs=0.02)
        assert bal.residual == max(abs(r) for r in bal.residual_path)

    def test_inviscid_uses_entropy_only(self):
        e = [VortexEnsemble(np.ones(500), rng_stream(s, 9).standard_normal((500, 2)), t)
             for s, t in enumerate((0.0, 0.1, 0.2))]
        bal = entropy_balance(TrajectoryStore(e), 0.0, KdeSpec(shape=64))
        assert all(math.isnan(i) for i in bal.I_path)
        assert bal.residual < 0.1

    def test_needs_three_checkpoints(self):
        e = [VortexEnsemble(np.ones(5), np.zeros((5, 2)), t) for t in (0.0, 0.1)]
        with pytest.raises(ValueError):
            entropy_balance(TrajectoryStore(e), 0.5)

    def test_exact_cancellation_oracle(self):
        # Lamb-Oseen position law: variance 2 nu (t + t0); nu int_0^t I = log((t + t0) / t0)
        nu, t0 = 0.1, 5.0
        from vortexlab.estimators import entropy_H, gaussian_grid
        geom = centered_geometry(20.0, 512)
        h0 = entropy_H(gaussian_grid(2 * nu * t0, geom))
        for t in (0.25, 0.5, 1.0):
            ht = entropy_H(gaussian_grid(2 * nu * (t + t0), geom))
            assert abs(ht - h0 + math.log((t + t0) / t0)) <= 1e-12
            assert ht == pytest.approx(gaussian_entropy(2 * nu * (t + t0)), abs=1e-12)


@pytest.fixture(scope="module")
def checkpointed_runs():
    runs = []
    for seed in range(10):
        cfg = SimConfig(n_particles=300, sigma=1.0, dt=0.01, t_end=0.2, seed=seed, epsilon=1e-2,
                        save_times=tuple(np.round(np.arange(0, 0.2001, 0.01), 10)))
        runs.append(run_interacting(SIGNED, cfg))
    return runs


class TestMartingale:
    def test_catalogue(self):
        assert CATALOGUE_VERSION == 1 and set(TEST_FUNCTIONS) == {"gauss", "trig", "one"}
        x = rng_stream(0, 9).standard_normal((5, 2))
        for name, params in [("gauss", {"scale": 0.7, "center": (0.2, -0.1)}), ("trig", {"wavenumber": 1.3})]:
            val, grad, lap = TEST_FUNCTIONS[name](params)
            h = 1e-4
            for a in range(2):
                e = np.zeros(2)
                e[a] = h
                fd = (val(x + e) - val(x - e)) / (2 * h)
                np.testing.assert_allclose(grad(x)[:, a], fd, atol=1e-7)
            fd_lap = sum((val(x + d) - 2 * val(x) + val(x - d)) / h**2 for d in (np.array([h, 0]), np.array([0, h])))
            np.testing.assert_allclose(lap(x), fd_lap, atol=1e-5)

    def test_constant_phi_gives_zero(self, checkpointed_runs):
        test = MartingaleTest(phi=("one", {}), s=0.0, t=0.2)
        assert martingale_residual(checkpointed_runs[0], 1e-2, test) == 0.0

    def test_tracks_ito_term(self, checkpointed_runs):
        test = MartingaleTest(marks=(("gauss", {"scale": 2.0}),), mark_times=(0.0,), s=0.05, t=0.2, psi="tanh")
        F = np.array([martingale_residual(r, 1e-2, test) for r in checkpointed_runs])
        R = np.array([ito_reduced_residual(r, test) for r in checkpointed_runs])
        assert np.corrcoef(F, R)[0, 1] > 0.9
        assert abs(F.mean()) < 3 * F.std(ddof=1) / math.sqrt(len(F))

    def test_validation(self, checkpointed_runs):
        with pytest.raises(ValueError):
            MartingaleTest(s=0.5, t=0.2)
        with pytest.raises(ValueError):
            MartingaleTest(phi=("bessel", {}))
        with pytest.raises(ValueError):
            MartingaleTest(marks=(("one", {}),), mark_times=())
        with pytest.raises(ValueError, match="checkpoint"):
            martingale_residual(checkpointed_runs[0], 1e-2, MartingaleTest(s=0.0, t=0.155))
        assert MartingaleTest().to_dict()["version"] == 1

    def test_ito_needs_every_step(self):
        cfg = SimConfig(n_particles=10, sigma=1.0, dt=0.01, t_end=0.04, save_times=(0.0, 0.02, 0.04))
        store = run_interacting(LAW, cfg)
        with pytest.raises(ValueError, match="every step"):
            ito_reduced_residual(store, MartingaleTest(s=0.0, t=0.04))


class TestSlopeFit:
    def test_recovers_inverse_scaling(self):
        rng = rng_stream(0, 9)
        samples = {n: rng.standard_normal(200) / math.sqrt(n) for n in (250, 500, 1000, 2000)}
        fit = fit_variance_slope(samples, n_boot=500)
        assert fit.slope == pytest.approx(-1.0, abs=0.2)
        assert fit.ci_low < -1.0 < fit.ci_high

    def test_deterministic(self):
        rng = rng_stream(1, 9)
        samples = {n: rng.standard_normal(30) for n in (10, 20, 40)}
        assert fit_variance_slope(samples, 200, seed=3) == fit_variance_slope(samples, 200, seed=3)


def test_functional_report():
    e = gaussian_ensemble(3000, 2, np.where(np.arange(3000) % 2 == 0, 1.0, -0.5))
    rep = functional_report(e, KdeSpec(shape=96))
    assert rep.is_finite()
    assert rep.entropy_H == pytest.approx(gaussian_entropy(1.0), abs=0.1)
    assert rep.moment_Mk >= 1 and rep.min_pair_distance > 0
    assert set(rep.neg_moment_gamma) == {"0.5", "1.0", "1.5"}
    assert set(rep.lp_norms) == {"1", "2", "4", "inf"}
    assert rep.to_dict()["meta"]["fisher_threshold"] > 0
