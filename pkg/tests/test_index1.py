"""Index-1 reduction: annihilation identities and exact discrete cancellation."""

import numpy as np
import pytest

from helpers import random_points
from sdaekit.errors import (
    DimensionMismatchError,
    MethodPreconditionError,
    SingularReductionError,
)
from sdaekit.expr import evaluate, parse
from sdaekit.index1 import build_index1_reduction, build_index1_sde, solve_index1
from sdaekit.integrator import euler_maruyama, wiener_increments
from sdaekit.problem import SdaeProblem, builtin


def pinned_u_problem():
    # constraint pins u to 0; D_x g = 0, D_u g = 1
    return SdaeProblem(
        n=1, m=1, p=1, d=1,
        f=[parse("-x1")], sigma=[[parse("0.1")]],
        g=[parse("u1")], gamma=[[parse("0")]],
        x0=[0.5], u0_guess=[0.0],
    )


def mixed_2d_problem():
    # m = p = 2 exercises the batched linear-solve path
    return SdaeProblem(
        n=2, m=2, p=2, d=2,
        f=[parse("x2 + u1"), parse("-x1 + u2")],
        sigma=[[parse("0.2"), parse("0")], [parse("0.1"), parse("0.3")]],
        g=[parse("u1 + 0.1*u2 - x1 - 0.05*x2^2"), parse("u2 - 0.2*x2 + 0.3*sin(x1)")],
        gamma=[[parse("0.05"), parse("0")], [parse("0"), parse("0.1")]],
        x0=[0.0, 0.0], u0_guess=[0.0, 0.0],
    )


def contraction_example():
    return SdaeProblem(
        n=1, m=1, p=1, d=1,
        f=[parse("x1")], sigma=[[parse("0.1")]],
        g=[parse("0.25*x1 + 0.5*u1")], gamma=[[parse("0")]],
        x0=[0.0], u0_guess=[0.0],
    )


INDEX1_PROBLEMS = [
    builtin("linear-index1"),
    pinned_u_problem(),
    mixed_2d_problem(),
    contraction_example(),
]


class TestSymbolicForms:
    def test_linear_index1_coefficients(self):
        red = build_index1_reduction(builtin("linear-index1"))
        # D_x g = -1, D_u g = 1 => B = 0.3, a = u
        assert evaluate(red.b_symbolic[0][0], {"x1": 0.3, "u1": -0.7}) == pytest.approx(0.3)
        for pt in random_points({"x1", "u1"}, 20, -2, 2, seed=4):
            assert evaluate(red.a_symbolic[0], pt) == pytest.approx(pt["u1"], rel=1e-12)

    def test_pinned_u_gives_zero_dynamics(self):
        red = build_index1_reduction(pinned_u_problem())
        for pt in random_points({"x1", "u1"}, 20, -2, 2, seed=5):
            assert evaluate(red.b_symbolic[0][0], pt) == 0.0
            assert evaluate(red.a_symbolic[0], pt) == 0.0


class TestAnnihilationIdentities:
    @pytest.mark.parametrize("pr", INDEX1_PROBLEMS, ids=lambda p: p.name or "anon")
    def test_diffusion_identity(self, pr):
        red = build_index1_reduction(pr)
        rng = np.random.default_rng(17)
        pts = rng.uniform(-1, 1, size=(100, pr.n + pr.m))
        resid = red.diffusion_residual(pts)
        assert np.nanmax(np.abs(resid)) <= 1e-10

    @pytest.mark.parametrize("pr", INDEX1_PROBLEMS, ids=lambda p: p.name or "anon")
    def test_drift_identity(self, pr):
        red = build_index1_reduction(pr)
        rng = np.random.default_rng(18)
        pts = rng.uniform(-1, 1, size=(100, pr.n + pr.m))
        resid = red.drift_residual(pts)
        assert np.nanmax(np.abs(resid)) <= 1e-10


class TestLinearIndex1Exactness:
    def test_constraint_preserved_to_machine_precision(self):
        path = solve_index1(builtin("linear-index1"), dt=1e-3, T=1.0, seed=1)
        assert path.status.completed
        diff = path.column("u1") - path.column("x1")
        assert np.abs(diff).max() <= 1e-12
        assert path.metadata["max_constraint_violation"] <= 1e-12

    def test_matches_closed_form_coupled_recursion(self):
        pr = builtin("linear-index1")
        dt, T, seed = 1e-3, 1.0, 3
        sde = build_index1_sde(pr)
        inc = wiener_increments(seed, 1000, 1, dt)
        path = euler_maruyama(sde, pr.init_point(), dt, T, inc)
        # closed form: u == x solving dx = x dt + 0.3 dW, stepped explicitly
        x = np.empty(1001)
        x[0] = 1.0
        for k in range(1000):
            x[k + 1] = x[k] + x[k] * dt + 0.3 * inc[k, 0]
        np.testing.assert_allclose(path.column("x1"), x, rtol=0, atol=1e-12)
        np.testing.assert_allclose(path.column("u1"), x, rtol=0, atol=1e-12)


class TestPreconditions:
    def test_high_index_rejected_citing_dug(self):
        with pytest.raises(MethodPreconditionError, match="D_u g"):
            build_index1_sde(builtin("paper-example"))

    def test_inconsistent_init_rejected(self):
        pr = builtin("linear-index1")
        pr.u0_guess = np.array([1.5])  # g(x0,u0) = 0.5
        with pytest.raises(MethodPreconditionError, match="initial condition"):
            solve_index1(pr, dt=1e-3, T=0.1, seed=1)

    def test_singular_start(self):
        pr = SdaeProblem(
            n=1, m=1, p=1, d=1,
            f=[parse("x1")], sigma=[[parse("0.1")]],
            g=[parse("u1^2 - x1")], gamma=[[parse("0")]],
            x0=[0.0], u0_guess=[0.0],
        )
        with pytest.raises(SingularReductionError):
            build_index1_sde(pr)

    def test_m_not_equal_p(self):
        pr = SdaeProblem(
            n=1, m=2, p=1, d=1,
            f=[parse("u1")], sigma=[[parse("u2")]],
            g=[parse("u1 + u2 - x1")], gamma=[[parse("0")]],
            x0=[0.0], u0_guess=[0.0, 0.0],
        )
        with pytest.raises(DimensionMismatchError):
            build_index1_sde(pr)


def test_guard_trips_mid_integration():
    # g = u1^2 - x1 drives u = sqrt(1 - t) through the guard as det D_u g = 2u decays
    pr = SdaeProblem(
        n=1, m=1, p=1, d=1,
        f=[parse("-1")], sigma=[[parse("0")]],
        g=[parse("u1^2 - x1")], gamma=[[parse("0")]],
        x0=[1.0], u0_guess=[1.0],
    )
    sde = build_index1_reduction(pr, guard=0.1).sde()
    path = euler_maruyama(sde, pr.init_point(), 1e-3, 2.0, np.zeros((2000, 1)))
    assert path.status.kind.value == "singular-reduction"
    # truncated just as 2*u crossed the guard
    assert abs(2.0 * path.column("u1")[-1]) <= 0.1 + 1e-3
