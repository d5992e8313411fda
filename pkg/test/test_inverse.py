import numpy as np
import pytest
from src.inverse import *
from src.utils import fit_slope

GRID = make_grid(1, np.pi, 64)
OMEGA = define_region(GRID, RegionSpec.box((0.0,), (1.0,)))
EXTERIOR = complement_region(OMEGA)
IDENTITY = AnisotropyMatrix.identity(1)
DIRECT = SolverParams(method=KrylovMethod.DIRECT)


def build(coefficients, orders, role=OperatorRole.FORWARD):
    terms = [PolyTerm(c, make_backend(GRID, IDENTITY, s)) for c, s in zip(coefficients, orders)]
    return PolyFractionalOperator(terms, role)


def exterior_bump(center=2.0, width=0.3):
    return restrict_field(GridField(GRID, np.exp(-(GRID.coordinates - center) ** 2 / (2 * width ** 2))), EXTERIOR)


def on_effective(report, field):
    return field.values[report.effective.region.mask]


class TestRecoverQ:
    P = build([1.0], [0.5])
    q = restrict_field(GridField.from_function(GRID, lambda x: 1.0 + x ** 2), OMEGA)
    f = exterior_bump()
    u = solve_linear(LinearProblem(P, q, f, OMEGA), SolverParams(method=KrylovMethod.CG, tol=1e-12)).u

    def test_roundtrip(self):
        report = recover_q(self.P, self.u, OMEGA, 1e-3, truth=self.q)
        assert report.rel_error_on_E <= 1e-6
        assert 0 < report.coverage <= 1
        assert np.all(np.isnan(report.estimate.values[~report.effective.region.mask]))

    def test_zero_potential(self):
        u = solve_linear(LinearProblem(self.P, None, self.f, OMEGA), DIRECT).u
        report = recover_q(self.P, u, OMEGA, 1e-3)
        assert np.max(np.abs(on_effective(report, report.estimate))) < 1e-8
        assert report.rel_error_on_E is None

    def test_residual_identity(self):
        u = restrict_field(GridField.from_function(GRID, lambda x: 2.0 + np.cos(x)), OMEGA) + self.f
        r = apply_poly(self.P, u) + self.q * u
        report = recover_q(self.P, u, OMEGA, 1e-3)
        expected = self.q - r / u
        assert np.allclose(on_effective(report, report.estimate), on_effective(report, expected),
                           rtol=1e-12, atol=1e-10)

    @pytest.mark.parametrize('factor', [3.0, -0.5, 1e4])
    def test_homogeneous(self, factor):
        base = recover_q(self.P, self.u, OMEGA, 1e-3)
        scaled = recover_q(self.P, factor * self.u, OMEGA, 1e-3)
        assert np.array_equal(base.effective.region.mask, scaled.effective.region.mask)
        assert np.allclose(on_effective(base, base.estimate), on_effective(scaled, scaled.estimate), rtol=1e-8)

    def test_threshold_monotone(self):
        loose = recover_q(self.P, self.u, OMEGA, 1e-4)
        tight = recover_q(self.P, self.u, OMEGA, 1e-1)
        assert tight.effective.region.is_subset_of(loose.effective.region)
        assert tight.coverage <= loose.coverage

    def test_zero_solution(self):
        with pytest.raises(EmptyEffectiveSetError):
            recover_q(self.P, GridField.zeros(GRID), OMEGA)

    @pytest.mark.parametrize('tau', [0.0, 1.0, -0.1])
    def test_threshold_range(self, tau):
        with pytest.raises(ValueError):
            recover_q(self.P, self.u, OMEGA, tau)


class TestRecoverAlpha:
    P = build([1.0, 0.1], [0.5, 1.5])
    f = exterior_bump()
    u = solve_linear(LinearProblem(P, None, f, OMEGA), DIRECT).u

    def test_roundtrip(self):
        target = self.P.terms[0]
        truth = restrict_field(GridField.constant(GRID, 1.0), OMEGA)
        report = recover_alpha(self.P.without_term(0), None, self.u, target.backend, OMEGA, 1e-3, truth)
        assert report.rel_error_on_E <= 1e-6

    def test_top_term(self):
        target = self.P.terms[1]
        truth = restrict_field(GridField.constant(GRID, 0.1), OMEGA)
        report = recover_alpha(self.P.without_term(1), None, self.u, target.backend, OMEGA, 1e-3, truth)
        assert report.rel_error_on_E <= 1e-6

    def test_homogeneous(self):
        backend = self.P.terms[0].backend
        rest = self.P.without_term(0)
        base = recover_alpha(rest, None, self.u, backend, OMEGA, 1e-3)
        scaled = recover_alpha(rest, None, 7.0 * self.u, backend, OMEGA, 1e-3)
        assert np.allclose(on_effective(base, base.estimate), on_effective(scaled, scaled.estimate), rtol=1e-8)

    def test_vanishing_power(self):
        with pytest.raises(EmptyEffectiveSetError):
            recover_alpha(None, None, GridField.zeros(GRID), self.P.terms[0].backend, OMEGA)


class TestFiniteDifferenceWeights:
    test_map = {
        ((-1.0, 0.0, 1.0), 1): [-0.5, 0.0, 0.5],
        ((-1.0, 0.0, 1.0), 2): [1.0, -2.0, 1.0],
        ((-0.5, 0.0, 0.5), 1): [-1.0, 0.0, 1.0],
        ((-2.0, -1.0, 0.0, 1.0, 2.0), 1): [1 / 12, -2 / 3, 0.0, 2 / 3, -1 / 12],
    }

    @pytest.mark.parametrize('key', test_map.keys())
    def test_weights(self, key):
        nodes, order = key
        assert np.allclose(finite_difference_weights(list(nodes), order), TestFiniteDifferenceWeights.test_map[key],
                           atol=1e-12)

    def test_insufficient_nodes(self):
        with pytest.raises(StencilError):
            finite_difference_weights([-1.0, 1.0], 2)


class TestLinearize:
    u1 = GridField.from_function(GRID, lambda x: np.exp(-x ** 2))

    def test_linear_family(self):
        solutions = [(eps, eps * self.u1) for eps in (-0.02, -0.01, 0.01, 0.02)]
        assert np.allclose(linearize(solutions, 1).values, self.u1.values, atol=1e-10)

    def test_quadratic_family(self):
        u2 = GridField.from_function(GRID, lambda x: np.cos(x))
        solutions = [(eps, eps * self.u1 + eps ** 2 / 2 * u2) for eps in (-0.1, 0.1, -0.2, 0.2)]
        assert np.allclose(linearize(solutions, 1).values, self.u1.values, atol=1e-10)
        assert np.allclose(linearize(solutions, 2).values, u2.values, atol=1e-8)

    @pytest.mark.parametrize('solutions, order', [([], 1), ([(0.1, None), (0.2, None)], 1),
                                                  ([(0.1, None), (0.1, None)], 1), ([(0.1, None), (-0.1, None)], 0)])
    def test_invalid_stencil(self, solutions, order):
        solutions = [(eps, self.u1) for eps, _ in solutions]
        with pytest.raises(StencilError):
            linearize(solutions, order)

    def test_grid_mismatch(self):
        other = GridField.zeros(make_grid(1, np.pi, 32))
        with pytest.raises(GridMismatchError):
            linearize([(0.1, self.u1), (-0.1, other)], 1)


class TestLinearizationConvergence:
    P = build([1.0], [0.5])
    f1 = exterior_bump(1.5, 0.3)
    source = TaylorSource([GridField.zeros(GRID), GridField.zeros(GRID), GridField.constant(GRID, 1.0)])
    newton = NewtonParams(tol=1e-13)
    schedule = [2e-2, 1e-2, 5e-3]

    def forward(self, data):
        return solve_semilinear(SemilinearProblem(self.P, self.source, data, OMEGA, self.newton), DIRECT).u

    def test_second_order_in_eps(self):
        exact, = solve_linearization(self.P, self.source, self.f1, OMEGA, 1, DIRECT)
        errors = []
        for eps in self.schedule:
            estimate = linearize([(eps, self.forward(eps * self.f1)), (-eps, self.forward(-eps * self.f1))], 1)
            errors.append((estimate - exact).max_abs())
        assert fit_slope(self.schedule, errors) >= 1.9

    def test_second_derivative(self):
        exact = solve_linearization(self.P, self.source, self.f1, OMEGA, 2, DIRECT)[1]
        eps = 5e-3
        estimate = linearize([(eps, self.forward(eps * self.f1)), (-eps, self.forward(-eps * self.f1))], 2)
        assert (estimate - exact).max_abs() <= 1e-4 * exact.max_abs()


class TestRecoverTaylor:
    P = build([1.0], [0.5])
    f1 = exterior_bump()

    def forward_model(self, source, newton=NewtonParams(tol=1e-13)):
        def model(data):
            return solve_semilinear(SemilinearProblem(self.P, source, data, OMEGA, newton), DIRECT).u
        return model

    def test_linear_potential(self):
        q = restrict_field(GridField.from_function(GRID, lambda x: 1.0 + x ** 2), OMEGA)
        zero = GridField.zeros(GRID)
        reports = recover_taylor(self.P, self.f1, 1, OMEGA, (1e-2, 2e-2), 1e-3,
                                 self.forward_model(TaylorSource([zero, q])), truth=[zero, q])
        assert len(reports) == 2
        assert reports[1].rel_error_on_E <= 1e-6
        assert reports[0].rel_error_on_E <= 1e-6

    def test_quadratic_source(self):
        zero = GridField.zeros(GRID)
        source = TaylorSource([zero, zero, GridField.constant(GRID, 1.0)])
        truth = [zero, zero, restrict_field(GridField.constant(GRID, 1.0), OMEGA)]
        reports = recover_taylor(self.P, self.f1, 2, OMEGA, (5e-3, 1e-2, 2e-2), 1e-2, self.forward_model(source),
                                 truth)
        assert reports[1].rel_error_on_E <= 1e-4
        assert reports[2].rel_error_on_E <= 1e-3
        assert reports[0].effective.region.is_subset_of(reports[2].effective.region)

    def test_order_zero(self):
        F0 = restrict_field(GridField.from_function(GRID, lambda x: np.cos(x)), OMEGA)

        def model(data):
            return solve_linear(LinearProblem(self.P, None, data, OMEGA, -1.0 * F0), DIRECT).u

        reports = recover_taylor(self.P, self.f1, 0, OMEGA, (), 1e-3, model, truth=[F0])
        assert len(reports) == 1
        u = model(self.f1)
        mask = OMEGA.mask
        assert np.allclose(reports[0].estimate.values[mask], -apply_poly(self.P, u).values[mask], rtol=1e-12)
        assert reports[0].rel_error_on_E <= 1e-8

    def test_from_exact_derivatives(self):
        zero = GridField.zeros(GRID)
        F2 = GridField.constant(GRID, 1.0)
        source = TaylorSource([zero, zero, F2])
        derivatives = solve_linearization(self.P, source, self.f1, OMEGA, 2, DIRECT)
        reports = recover_taylor_from_derivatives(self.P, derivatives, OMEGA, 1e-2, [zero, zero, F2])
        assert reports[0].rel_error_on_E <= 1e-8
        assert reports[1].rel_error_on_E <= 1e-8

    def test_truth_length(self):
        with pytest.raises(ValueError):
            recover_taylor(self.P, self.f1, 1, OMEGA, (1e-2,), 1e-3, lambda data: data, truth=[self.f1])

    def test_schedule_positive(self):
        with pytest.raises(StencilError):
            recover_taylor(self.P, self.f1, 1, OMEGA, (0.0,), 1e-3, lambda data: data)
