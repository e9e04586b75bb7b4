"""Exact reduction of an index-1 problem to a plain SDE on (x, u).

The algebraic variable is promoted to a state whose drift ``a`` and diffusion
``B`` are chosen so that the Ito differential of the constraint vanishes
identically:

    B = -(D_u g)^{-1} ((D_x g) sigma + Gamma)
    a = -(D_u g)^{-1} ((D_x g) f
          + 1/2 Tr(sigma D2_xx(g) sigma' + B D2_uu(g) B' + 2 sigma D2_xu(g) B'))

At runtime both are assembled per evaluation point through a batched m-by-m
linear solve; closed-form symbolic entries (cofactor inverse) are exposed for
inspection when m <= 2.  A runtime determinant guard stands in for the
"bounded inverse in a neighbourhood" hypothesis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _symlin, expr
from .errors import (
    DimensionMismatchError,
    MethodPreconditionError,
    SingularReductionError,
)
from .integrator import AugmentedSde, SamplePath, euler_maruyama, wiener_increments, n_steps
from .problem import CONSISTENCY_TOL, SINGULAR_TOL, ProblemKind, SdaeProblem, classify

__all__ = ["Index1Reduction", "build_index1_reduction", "build_index1_sde", "solve_index1"]


# the shared Ito correction pattern: sum_{k,l,j} A_{kj} H_{kl} C_{lj}
_TRACE = "...kj,...kl,...lj->..."


@dataclass
class Index1Reduction:
    """Evaluators (and small-m symbolic forms) for the reduced SDE on (x, u)."""

    problem: SdaeProblem
    a_symbolic: list[expr.Expression] | None
    b_symbolic: list[list[expr.Expression]] | None
    singular_guard: float = SINGULAR_TOL

    # compiled pieces, filled by the builder
    _f: expr.CompiledVector = field(repr=False, default=None)
    _sigma: expr.CompiledMatrix = field(repr=False, default=None)
    _gamma: expr.CompiledMatrix = field(repr=False, default=None)
    _dxg: expr.CompiledMatrix = field(repr=False, default=None)
    _dug: expr.CompiledMatrix = field(repr=False, default=None)
    _hess_xx: list[expr.CompiledMatrix] = field(repr=False, default=None)
    _hess_uu: list[expr.CompiledMatrix] = field(repr=False, default=None)
    _hess_xu: list[expr.CompiledMatrix] = field(repr=False, default=None)

    def _env(self, points: np.ndarray):
        points = np.asarray(points, dtype=float)
        return expr.make_env(self.problem.labels, points), points.shape[:-1]

    def coefficients(self, points: np.ndarray):
        """Evaluate (a, B, det D_u g) at points of shape (..., n+m)."""
        pr = self.problem
        env, batch = self._env(points)
        with np.errstate(all="ignore"):
            dxg = self._dxg(env, batch)
            dug = self._dug(env, batch)
            sig = self._sigma(env, batch)
            gam = self._gamma(env, batch)
            f = self._f(env, batch)
            det = np.linalg.det(dug)
            rhs_b = -(dxg @ sig + gam)
            ok = np.abs(det) > self.singular_guard
            safe_dug = np.where(ok[..., None, None], dug, np.eye(pr.m))
            B = np.linalg.solve(safe_dug, rhs_b)
            trace = np.empty(batch + (pr.p,))
            for i in range(pr.p):
                hxx = self._hess_xx[i](env, batch)
                huu = self._hess_uu[i](env, batch)
                hxu = self._hess_xu[i](env, batch)
                trace[..., i] = (
                    np.einsum(_TRACE, sig, hxx, sig)
                    + np.einsum(_TRACE, B, huu, B)
                    + 2.0 * np.einsum(_TRACE, sig, hxu, B)
                )
            rhs_a = -((dxg @ f[..., None])[..., 0] + 0.5 * trace)
            a = np.linalg.solve(safe_dug, rhs_a[..., None])[..., 0]
            a = np.where(ok[..., None], a, np.nan)
            B = np.where(ok[..., None, None], B, np.nan)
        return a, B, det

    def diffusion_residual(self, points: np.ndarray) -> np.ndarray:
        """(D_x g) sigma + (D_u g) B + Gamma; zero wherever B is defined."""
        env, batch = self._env(points)
        a, B, _ = self.coefficients(points)
        return self._dxg(env, batch) @ self._sigma(env, batch) + self._dug(env, batch) @ B + self._gamma(env, batch)

    def drift_residual(self, points: np.ndarray) -> np.ndarray:
        """Drift half of the constraint differential; zero wherever a is defined."""
        pr = self.problem
        env, batch = self._env(points)
        a, B, _ = self.coefficients(points)
        sig = self._sigma(env, batch)
        f = self._f(env, batch)
        out = np.empty(batch + (pr.p,))
        for i in range(pr.p):
            hxx = self._hess_xx[i](env, batch)
            huu = self._hess_uu[i](env, batch)
            hxu = self._hess_xu[i](env, batch)
            out[..., i] = 0.5 * (
                np.einsum(_TRACE, sig, hxx, sig)
                + np.einsum(_TRACE, B, huu, B)
                + 2.0 * np.einsum(_TRACE, sig, hxu, B)
            )
        return out + (self._dxg(env, batch) @ f[..., None])[..., 0] + (self._dug(env, batch) @ a[..., None])[..., 0]

    def sde(self) -> AugmentedSde:
        pr = self.problem

        def both(points):
            env, batch = self._env(points)
            a, B, _ = self.coefficients(points)
            with np.errstate(all="ignore"):
                drift = np.concatenate([self._f(env, batch), a], axis=-1)
                diff = np.concatenate([self._sigma(env, batch), B], axis=-2)
            return drift, diff

        def guard(points):
            env, batch = self._env(points)
            with np.errstate(all="ignore"):
                det = np.linalg.det(self._dug(env, batch))
            return np.isfinite(det) & (np.abs(det) > self.singular_guard)

        return AugmentedSde(
            dim=pr.n + pr.m,
            d=pr.d,
            labels=pr.labels,
            drift=lambda pts: both(pts)[0],
            diffusion=lambda pts: both(pts)[1],
            both=both,
            guard=guard,
            origin="index1",
            problem=pr,
        )


def build_index1_reduction(pr: SdaeProblem, guard: float = SINGULAR_TOL) -> Index1Reduction:
    cls = classify(pr)
    if cls.kind is not ProblemKind.INDEX1:
        raise MethodPreconditionError(
            "constraint does not reference the algebraic variable (D_u g = 0); "
            "the index-1 reduction does not apply - reduce the index or use an "
            "approximate method"
        )
    if pr.m != pr.p:
        raise DimensionMismatchError(
            f"index-1 reduction needs m = p, got m={pr.m}, p={pr.p}"
        )
    x_l, u_l = pr.x_labels, pr.u_labels
    dxg_sym = expr.jacobian(pr.g, x_l)
    dug_sym = expr.jacobian(pr.g, u_l)

    red = Index1Reduction(problem=pr, a_symbolic=None, b_symbolic=None, singular_guard=guard)
    red._f = expr.CompiledVector(pr.f)
    red._sigma = expr.CompiledMatrix(pr.sigma)
    red._gamma = expr.CompiledMatrix(pr.gamma)
    red._dxg = expr.CompiledMatrix(dxg_sym)
    red._dug = expr.CompiledMatrix(dug_sym)
    red._hess_xx = [expr.CompiledMatrix(expr.hessian(gi, x_l, x_l)) for gi in pr.g]
    red._hess_uu = [expr.CompiledMatrix(expr.hessian(gi, u_l, u_l)) for gi in pr.g]
    red._hess_xu = [expr.CompiledMatrix(expr.hessian(gi, x_l, u_l)) for gi in pr.g]

    if pr.m <= 2:
        inv = _symlin.inverse(dug_sym)
        rhs_b = _symlin.matmul(dxg_sym, pr.sigma)
        rhs_b = [[expr.add(v, gmr) for v, gmr in zip(row, grow)] for row, grow in zip(rhs_b, pr.gamma)]
        red.b_symbolic = [
            [expr.neg(e) for e in row] for row in _symlin.matmul(inv, rhs_b)
        ]
        # drift row needs the symbolic B inside its trace terms
        b_sym = red.b_symbolic
        rhs_a: list[expr.Expression] = []
        for i in range(pr.p):
            hxx = expr.hessian(pr.g[i], x_l, x_l)
            huu = expr.hessian(pr.g[i], u_l, u_l)
            hxu = expr.hessian(pr.g[i], x_l, u_l)
            acc: expr.Expression = expr.const(0.0)
            for k in range(pr.n):
                acc = expr.add(acc, expr.mul(dxg_sym[i][k], pr.f[k]))
            tr: expr.Expression = expr.const(0.0)
            for j in range(pr.d):
                for k in range(pr.n):
                    for l in range(pr.n):
                        tr = expr.add(tr, expr.mul(expr.mul(pr.sigma[k][j], hxx[k][l]), pr.sigma[l][j]))
                for k in range(pr.m):
                    for l in range(pr.m):
                        tr = expr.add(tr, expr.mul(expr.mul(b_sym[k][j], huu[k][l]), b_sym[l][j]))
                for k in range(pr.n):
                    for l in range(pr.m):
                        tr = expr.add(tr, expr.mul(expr.const(2.0), expr.mul(expr.mul(pr.sigma[k][j], hxu[k][l]), b_sym[l][j])))
            rhs_a.append(expr.add(acc, expr.mul(expr.const(0.5), tr)))
        red.a_symbolic = [expr.neg(e) for e in _symlin.matvec(inv, rhs_a)]
    return red


def build_index1_sde(pr: SdaeProblem, guard: float = SINGULAR_TOL) -> AugmentedSde:
    """Validate the reduction at the initial point and return the reduced SDE."""
    red = build_index1_reduction(pr, guard)
    _, _, det = red.coefficients(pr.init_point())
    if not np.isfinite(det) or abs(float(det)) <= guard:
        raise SingularReductionError(
            f"|det D_u g| = {abs(float(det)):.3e} at the initial point "
            f"(guard {guard:.1e})"
        )
    return red.sde()


def solve_index1(pr: SdaeProblem, dt: float, T: float, seed: int) -> SamplePath:
    """End-to-end: reduce, integrate, and report the worst constraint violation."""
    g0 = pr.constraint_values(pr.x0, pr.u0_guess)
    if np.linalg.norm(g0, ord=np.inf) > CONSISTENCY_TOL:
        raise MethodPreconditionError(
            f"initial condition violates the constraint: |g(x0, u0)| = "
            f"{np.linalg.norm(g0, ord=np.inf):.3e} > {CONSISTENCY_TOL:.1e}"
        )
    sde = build_index1_sde(pr)
    increments = wiener_increments(seed, n_steps(T, dt), pr.d, dt)
    path = euler_maruyama(sde, pr.init_point(), dt, T, increments, seed=seed)
    env = expr.make_env(pr.labels, path.states)
    g_vals = expr.CompiledVector(pr.g)(env, (len(path),))
    path.metadata["max_constraint_violation"] = float(np.abs(g_vals).max())
    return path
