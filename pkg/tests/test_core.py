import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vortexlab.core import (Atom, CirculationLaw, GaussianDensity, GaussianVortex, GridDensity,
                            GridGeometry, SimConfig, VortexEnsemble, VorticityField, lift_vorticity,
                            moment_Mk, read_snapshot, rng_stream, sample_ensemble, snap_indices,
                            time_grid, write_snapshot)

# radial quadrature of (1 + r^2)^(1/2) r exp(-r^2/2), mpmath at 30 digits
E_BRACKET_X_STD_GAUSS = 1.65567954241879847


def lamb_oseen_grid(n=64, L=16.0):
    return VorticityField.from_function(GaussianVortex(1.0, 1.0), n, L)


class TestSimConfig:
    def test_nu_is_derived(self):
        assert SimConfig(sigma=0.2).nu == pytest.approx(0.02, rel=1e-15)
        assert SimConfig(sigma=0.0).nu == 0.0

    def test_nu_not_settable(self):
        with pytest.raises(TypeError):
            SimConfig(nu=0.5)

    @pytest.mark.parametrize("k", [0.0, -0.1, 1.5])
    def test_k_range(self, k):
        with pytest.raises(ValueError, match="moment_order_k"):
            SimConfig(moment_order_k=k)

    def test_default_epsilon_heuristic(self):
        c = SimConfig(sigma=1.0, dt=1e-4)
        assert c.epsilon == pytest.approx(10 * 1e-2)

    @pytest.mark.parametrize("kw", [dict(dt=0.0), dict(epsilon=-1.0), dict(sigma=-1.0),
                                    dict(save_times=(0.2, 0.1)), dict(save_times=(0.0, 2.0)),
                                    dict(n_particles=0), dict(seed=-1)])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            SimConfig(**kw)

    def test_default_save_times(self):
        assert SimConfig(t_end=0.3).save_times == (0.0, 0.3)
        assert SimConfig(t_end=0.0).save_times == (0.0,)


class TestRng:
    def test_streams_reproducible_and_distinct(self):
        a = rng_stream(7, 1, 3).standard_normal(5)
        assert np.array_equal(a, rng_stream(7, 1, 3).standard_normal(5))
        assert not np.array_equal(a, rng_stream(7, 1, 4).standard_normal(5))
        assert not np.array_equal(a, rng_stream(8, 1, 3).standard_normal(5))


class TestEnsemble:
    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            VortexEnsemble(np.ones(2), [[0, 0], [np.nan, 0]])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            VortexEnsemble(np.ones(3), np.zeros((2, 2)))


class TestLifting:
    def test_nonnegative_single_atom(self):
        g = lift_vorticity(lamb_oseen_grid())
        assert len(g.atoms) == 1
        assert g.atoms[0].weight == 1.0
        assert g.atoms[0].m == pytest.approx(lamb_oseen_grid().total(), rel=1e-14)

    def test_lamb_oseen_roundtrip(self):
        w = lamb_oseen_grid()
        g = lift_vorticity(w)
        np.testing.assert_allclose(g.vorticity_on(w.geometry), w.values, rtol=0, atol=1e-12)

    def test_two_atom_split(self):
        # symmetric signed pair: m = +-a with a = ||w||_1 and equal weights
        def w(x, y):
            return 0.5 * GaussianDensity(0.5, (-2, 0)).pdf(x, y) - 0.5 * GaussianDensity(0.5, (2, 0)).pdf(x, y)
        field = VorticityField.from_function(w, 128, 24.0)
        g = lift_vorticity(field)
        a = np.abs(field.values).sum() * field.geometry.cell_volume
        assert a == pytest.approx(1.0, abs=0.01)
        assert [at.m for at in g.atoms] == pytest.approx([a, -a], rel=1e-12)
        assert [a.weight for a in g.atoms] == pytest.approx([0.5, 0.5], abs=1e-10)
        plus = np.where(field.values > 0, field.values, 0)
        np.testing.assert_allclose(g.atoms[0].density.values, plus / (plus.sum() * field.geometry.cell_volume))
        np.testing.assert_allclose(g.vorticity_on(field.geometry), field.values, atol=1e-12)

    def test_analytic_gaussian(self):
        g = lift_vorticity(GaussianVortex(-2.0, 1.5))
        assert g.atoms[0].m == -2.0 and g.atoms[0].density.variance == 1.5

    def test_zero_vorticity_rejected(self):
        with pytest.raises(ValueError, match="zero"):
            lift_vorticity(VorticityField(np.zeros((8, 8)), 1.0))
        with pytest.raises(ValueError):
            lift_vorticity(GaussianVortex(0.0))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_roundtrip_random_signed_grids(self, seed):
        rng = np.random.default_rng(seed)
        vals = rng.normal(size=(16, 16))
        field = VorticityField(vals, 3.0)
        g = lift_vorticity(field)
        np.testing.assert_allclose(g.vorticity_on(field.geometry), vals, atol=1e-12)
        assert sum(a.weight for a in g.atoms) == pytest.approx(1.0, abs=1e-15)


class TestSampling:
    def test_needs_two(self):
        with pytest.raises(ValueError):
            sample_ensemble(lift_vorticity(GaussianVortex()), 1, 0)

    def test_single_atom_circulations(self):
        e = sample_ensemble(lift_vorticity(GaussianVortex(0.7)), 50, 3)
        assert np.all(e.circulations == 0.7)

    def test_deterministic(self):
        g = lift_vorticity(lamb_oseen_grid())
        a, b = sample_ensemble(g, 500, 11), sample_ensemble(g, 500, 11)
        assert np.array_equal(a.positions, b.positions) and np.array_equal(a.circulations, b.circulations)

    def test_two_atom_fraction(self):
        # P(fraction in [0.47, 0.53]) = 1 - 1.8e-9 for Binomial(1e4, 1/2)
        law = CirculationLaw((Atom(1.0, 0.5, GaussianDensity(1.0)), Atom(-1.0, 0.5, GaussianDensity(1.0))))
        hits = sum(0.47 <= np.mean(sample_ensemble(law, 10_000, s).circulations > 0) <= 0.53
                   for s in range(20))
        assert hits >= 19

    def test_support_bound(self):
        law = CirculationLaw((Atom(0.3, 0.25, GaussianDensity(1.0)), Atom(-0.9, 0.75, GaussianDensity(2.0))))
        e = sample_ensemble(law, 2000, 0)
        assert np.max(np.abs(e.circulations)) <= law.bound

    def test_grid_density_sampling_moments(self):
        g = GridGeometry.from_bounds([(-8, 8), (-8, 8)], (257, 257))
        X, Y = g.mesh()
        v = np.exp(-(X**2 + Y**2) / 2) / (2 * np.pi)
        v /= v.sum() * g.cell_volume
        x = GridDensity(g, v).sample(rng_stream(0, 99), 200_000)
        # jitter adds a uniform cell variance dx^2/12
        assert x.mean(axis=0) == pytest.approx([0, 0], abs=0.01)
        assert x.var(axis=0) == pytest.approx([1 + g.spacing[0] ** 2 / 12] * 2, rel=0.02)

    def test_malformed_grid_density(self):
        g = GridGeometry.from_bounds([(0, 1), (0, 1)], (4, 4))
        with pytest.raises(ValueError):
            GridDensity(g, -np.ones((4, 4)))
        with pytest.raises(ValueError):
            GridDensity(g, np.ones((4, 4)))


class TestMoment:
    def test_origin(self):
        assert moment_Mk(VortexEnsemble(np.ones(3), np.zeros((3, 2))), 0.7) == 1.0

    def test_two_points(self):
        e = VortexEnsemble(np.ones(2), [[0, 0], [math.sqrt(3), 0]])
        assert moment_Mk(e, 1.0) == pytest.approx(1.5)

    def test_gaussian_quadrature_oracle(self):
        x = rng_stream(5, 99).standard_normal((100_000, 2))
        vals = np.sqrt(1 + np.sum(x**2, axis=1))
        se = vals.std() / math.sqrt(len(vals))
        assert abs(moment_Mk(VortexEnsemble(np.ones(len(x)), x), 1.0) - E_BRACKET_X_STD_GAUSS) < 3 * se

    @pytest.mark.parametrize("k", [0.0, 2.0])
    def test_k_domain(self, k):
        with pytest.raises(ValueError):
            moment_Mk(VortexEnsemble(np.ones(2), np.zeros((2, 2))), k)

    @given(st.floats(0.01, 1.99))
    def test_at_least_one(self, k):
        x = rng_stream(1, 99).standard_normal((50, 2))
        assert moment_Mk(VortexEnsemble(np.ones(50), x), k) >= 1.0


class TestVorticityField:
    def test_power_of_two(self):
        with pytest.raises(ValueError, match="powers of two"):
            VorticityField(np.zeros((6, 8)), 1.0)

    def test_nonfinite(self):
        v = np.zeros((4, 4))
        v[0, 0] = np.inf
        with pytest.raises(ValueError):
            VorticityField(v, 1.0)


def test_snapshot_roundtrip(tmp_path):
    e = VortexEnsemble([1.0, -0.5, 0.25], rng_stream(0, 5).standard_normal((3, 2)), 0.125, 9, 4)
    write_snapshot(tmp_path / "s.csv", e, 0.3, 1e-3)
    text = (tmp_path / "s.csv").read_text().splitlines()
    assert text[1] == "i,m,x,y"
    back, meta = read_snapshot(tmp_path / "s.csv")
    assert np.array_equal(back.positions, e.positions) and np.array_equal(back.circulations, e.circulations)
    assert (back.time, back.seed, back.step) == (0.125, 9, 4)
    assert meta == {"time": 0.125, "seed": 9, "step": 4, "N": 3, "sigma": 0.3, "epsilon": 1e-3}


def test_time_grid_partial_last_step():
    t = time_grid(0.25, 0.1)
    assert list(t[:-1]) == pytest.approx([0, 0.1, 0.2]) and t[-1] == 0.25
    assert snap_indices([0.0, 0.2, 0.25], t) == [0, 2, 3]
    with pytest.raises(ValueError):
        snap_indices([0.15], t)
