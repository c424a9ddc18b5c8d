import numpy as np
import pytest

from pathlangevin import (
    BridgeProblem,
    FreePathProblem,
    Grid,
    Observations,
    Path,
    builtin_potential,
    make_matrix_set,
    make_potential,
    stationary_start_weight,
    validate_problem,
    zero_potential,
)
from pathlangevin.model import finite_difference_derivatives

from conftest import make_smoothing


class TestBuiltinPotentials:
    def test_quadratic_values(self):
        pot = builtin_potential("quadratic", Q=[[1.0]])
        assert pot.value(np.array([2.0])) == pytest.approx(2.0)
        assert pot.grad(np.array([2.0]))[0] == pytest.approx(2.0)
        assert pot.hess(np.array([2.0]))[0, 0] == pytest.approx(1.0)
        assert pot.p == 1

    def test_double_well_critical_point(self):
        pot = builtin_potential("double_well", a=1.0, b=1.0)
        assert pot.value(np.array([1.0])) == pytest.approx(-0.25)
        assert pot.grad(np.array([1.0]))[0] == pytest.approx(0.0)
        assert pot.p == 2

    def test_double_well_third_contract(self):
        pot = builtin_potential("double_well", a=1.0, b=1.0)
        t = pot.third_contract(np.array([1.0]), np.array([[1.0]]))
        assert t[0] == pytest.approx(6.0)

    def test_rejects_bad_parameters(self):
        with pytest.raises(ValueError):
            builtin_potential("quadratic", Q=[[-1.0]])
        with pytest.raises(ValueError):
            builtin_potential("double_well", a=-1.0, b=1.0)
        with pytest.raises(ValueError):
            builtin_potential("nope")

    def test_batched_evaluation(self):
        pot = builtin_potential("double_well", a=1.0, b=2.0, d=2)
        pts = np.array([[1.0, 0.0], [0.5, -0.5]])
        assert pot.value(pts).shape == (2,)
        assert pot.grad(pts).shape == (2, 2)
        assert pot.hess(pts).shape == (2, 2, 2)


class TestFiniteDifferences:
    def test_quadratic_gradient_is_exact(self):
        g, _, _ = finite_difference_derivatives(
            lambda x: 0.5 * x[0] ** 2, np.array([3.0]), h=1e-4
        )
        assert abs(g[0] - 3.0) < 1e-7

    def test_quartic_hessian(self):
        # analytic hessian of x^4/4 is 3 x^2
        _, h, _ = finite_difference_derivatives(
            lambda x: 0.25 * x[0] ** 4, np.array([1.0]), h=1e-4
        )
        assert abs(h[0, 0] - 3.0) < 1e-6

    def test_constant_potential(self):
        g, h, t = finite_difference_derivatives(lambda x: 7.0, np.array([1.0, 2.0]))
        assert np.all(g == 0) and np.all(h == 0) and np.all(t == 0)

    def test_fallback_matches_analytic(self):
        ref = builtin_potential("double_well", a=1.0, b=1.0, d=2)
        fd = make_potential(
            lambda x: 0.25 * float(x @ x) ** 2 - 0.5 * float(x @ x), d=2, p=2
        )
        pts = np.array([[0.4, -0.7], [1.1, 0.3]])
        sigma = np.array([[1.0, 0.2], [0.2, 2.0]])
        assert np.allclose(fd.grad(pts), ref.grad(pts), atol=1e-6)
        assert np.allclose(fd.hess(pts), ref.hess(pts), atol=1e-4)
        assert np.allclose(
            fd.third_contract(pts, sigma), ref.third_contract(pts, sigma), atol=1e-3
        )


class TestGrid:
    def test_weights_sum_to_one(self):
        for M in (2, 7, 64):
            assert abs(Grid(M).weights.sum() - 1.0) < 1e-15

    def test_trapezoid_second_moment(self):
        # int u^2 du = 1/3 up to the composite trapezoid error du^2/6
        for M in (8, 32):
            g = Grid(M)
            err = abs(g.weights @ g.nodes**2 - 1.0 / 3.0)
            assert err < g.du**2 / 4

    def test_too_coarse(self):
        with pytest.raises(ValueError):
            Grid(1)


class TestPathAndObservations:
    def test_path_shape_check(self, grid16):
        with pytest.raises(ValueError):
            Path(np.zeros((5, 1)), grid16)
        with pytest.raises(ValueError):
            Path(np.full((17, 1), np.nan), grid16)

    def test_observation_count(self, grid16):
        with pytest.raises(ValueError):
            Observations(np.zeros((5, 1)), grid16)

    def test_node_values_must_start_at_zero(self, grid16):
        vals = np.linspace(0.5, 1.0, 17)
        with pytest.raises(ValueError):
            Observations.from_node_values(vals, grid16)

    def test_straight_line_increments(self):
        grid = Grid(4)
        obs = Observations.from_node_values(grid.nodes.copy(), grid)
        assert np.allclose(obs.increments, 0.25)


class TestMatrixSet:
    def test_defaults(self):
        ms = make_matrix_set(d=2)
        assert np.allclose(ms.A, 0) and np.allclose(ms.B, np.eye(2))
        assert np.allclose(ms.BBt_inv @ ms.BBt, np.eye(2), atol=1e-12)

    def test_singular_noise_is_hard_error(self):
        with pytest.raises(ValueError):
            make_matrix_set(B=[[1.0, 0.0], [1.0, 0.0]])


class TestValidateProblem:
    def test_quadratic_dissipativity(self):
        # Q = I, A = 0, B = I: the dissipativity matrix is -I
        spec = FreePathProblem(
            mats=make_matrix_set(d=1),
            potential=builtin_potential("quadratic", Q=[[1.0]]),
            x_minus=[0.0],
        )
        report = validate_problem(spec)
        assert report.ok
        names = [c.name for c in report.checks]
        assert "drift_dissipativity" in names

    def test_double_well_growth(self):
        spec = BridgeProblem(
            mats=make_matrix_set(d=1),
            potential=builtin_potential("double_well", a=1.0, b=1.0),
            x_minus=[-1.0],
            x_plus=[1.0],
        )
        report = validate_problem(spec)
        assert report.ok
        names = [c.name for c in report.checks]
        # p = 2, so the p = 1 drift check is skipped
        assert "drift_dissipativity" not in names
        # growth constant approaches a/4 = 1/4 on the radius sweep
        pot = spec.potential
        ratio = pot.value(np.array([[10.0]])) / 10.0**4
        assert 0.2 < ratio[0] <= 0.25

    def test_smoothing_start_weight_decay(self, grid16):
        spec = make_smoothing(grid16)
        report = validate_problem(spec)
        assert report.ok
        assert any(c.name == "start_weight_decay" for c in report.checks)

    def test_strict_mode_raises(self):
        # inconsistent hand-built potential: grad disagrees with value
        bad = builtin_potential("quadratic", Q=[[1.0]])
        from pathlangevin.model import Potential

        broken = Potential(
            value=bad.value,
            grad=lambda x: 3.0 * bad.grad(x),
            hess=bad.hess,
            third_contract=bad.third_contract,
            p=1,
            d=1,
        )
        spec = FreePathProblem(
            mats=make_matrix_set(d=1), potential=broken, x_minus=[0.0]
        )
        with pytest.warns(UserWarning):
            report = validate_problem(spec)
        assert not report.ok
        with pytest.raises(ValueError):
            validate_problem(spec, strict=True)

    def test_deterministic_given_seed(self):
        spec = FreePathProblem(
            mats=make_matrix_set(d=1),
            potential=builtin_potential("quadratic", Q=[[2.0]]),
            x_minus=[1.0],
        )
        r1 = validate_problem(spec, seed=3)
        r2 = validate_problem(spec, seed=3)
        assert [c.detail for c in r1.checks] == [c.detail for c in r2.checks]

    def test_failing_dissipativity(self):
        # strong expanding drift A overwhelms the quadratic potential
        spec = FreePathProblem(
            mats=make_matrix_set(A=[[5.0]], B=[[1.0]]),
            potential=builtin_potential("quadratic", Q=[[1.0]]),
            x_minus=[0.0],
        )
        with pytest.warns(UserWarning):
            report = validate_problem(spec)
        assert not report.ok


class TestDerivativeConsistencyInvariant:
    @pytest.mark.parametrize(
        "pot",
        [
            builtin_potential("quadratic", Q=[[2.0, 0.3], [0.3, 1.0]]),
            builtin_potential("double_well", a=0.7, b=1.3, d=2),
            zero_potential(2),
        ],
        ids=["quadratic", "double_well", "zero"],
    )
    def test_twenty_random_points(self, pot):
        rng = np.random.default_rng(0)
        pts = rng.uniform(-3, 3, size=(20, pot.d))
        sigma = np.eye(pot.d) + 0.25
        for x in pts:
            g_fd, h_fd, t_fd = finite_difference_derivatives(
                lambda q: float(pot.value(q[None])[0]), x, h=1e-5
            )
            assert np.allclose(pot.grad(x), g_fd, atol=1e-6 * (1 + np.abs(g_fd).max()))
            assert np.allclose(pot.hess(x), h_fd, atol=5e-5 * (1 + np.abs(h_fd).max()))
            t_ref = np.einsum("kij,ij->k", t_fd, sigma)
            assert np.allclose(
                pot.third_contract(x, sigma), t_ref, atol=1e-4 * (1 + np.abs(t_ref).max())
            )


def test_stationary_start_weight_is_negated_potential():
    pot = builtin_potential("double_well", a=1.0, b=1.0)
    sw = stationary_start_weight(pot)
    x = np.array([[0.8]])
    assert sw.log_value(x)[0] == pytest.approx(-pot.value(x)[0])
    assert sw.grad(x)[0, 0] == pytest.approx(-pot.grad(x)[0, 0])
