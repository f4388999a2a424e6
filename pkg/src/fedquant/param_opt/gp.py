"""Small dense geometric-program solver.

A GP is stored in exponent-coefficient form: every term is a positive
coefficient plus an exponent vector over the variables; the objective is a
posynomial and each constraint is posynomial <= 1.  The log-variable
substitution x = e^u makes every log-term affine and every log-posynomial a
log-sum-exp, i.e. smooth convex, which a primal barrier Newton method with
backtracking line search solves to tight KKT residuals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GpError(RuntimeError):
    pass


class GpInfeasibleError(GpError):
    def __init__(self, certificate: float):
        super().__init__(
            f"program is infeasible: phase-1 slack bottoms out at {certificate:.3e} (>= 1 means no interior)"
        )
        self.certificate = certificate


class GpSolverError(GpError):
    pass


@dataclass(frozen=True)
class Posynomial:
    """Sum of coeffs[k] * prod_j x_j ** expos[k, j]; all coefficients positive."""

    coeffs: np.ndarray
    expos: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "coeffs", np.asarray(self.coeffs, dtype=float))
        object.__setattr__(self, "expos", np.atleast_2d(np.asarray(self.expos, dtype=float)))
        if self.coeffs.ndim != 1 or self.coeffs.size != self.expos.shape[0]:
            raise ValueError("one coefficient per term required")
        if np.any(self.coeffs <= 0):
            raise ValueError("posynomial coefficients must be positive")

    def value(self, x: np.ndarray) -> float:
        return float(np.sum(self.coeffs * np.exp(self.expos @ np.log(x))))


@dataclass
class GpProgram:
    var_names: list
    objective: Posynomial
    constraints: list
    labels: list = None

    @property
    def n_vars(self) -> int:
        return len(self.var_names)


@dataclass
class GpSolution:
    x: np.ndarray
    objective: float
    duals: np.ndarray
    kkt_residual: float
    newton_iterations: int


class _Stacked:
    """All log-sum-exp blocks of a program stacked for vectorized evaluation."""

    def __init__(self, program: GpProgram):
        mats = [program.objective.expos] + [c.expos for c in program.constraints]
        logs = [np.log(program.objective.coeffs)] + [np.log(c.coeffs) for c in program.constraints]
        self.E = np.vstack(mats)
        self.b = np.concatenate(logs)
        sizes = [m.shape[0] for m in mats]
        self.starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(int)
        self.seg_of_row = np.repeat(np.arange(len(sizes)), sizes)
        self.m = len(program.constraints)

    def eval(self, u: np.ndarray):
        """Per-block log-sum-exp values F, softmax weights w, block gradients G."""
        z = self.E @ u + self.b
        mx = np.maximum.reduceat(z, self.starts)
        e = np.exp(z - mx[self.seg_of_row])
        s = np.add.reduceat(e, self.starts)
        F = mx + np.log(s)
        w = e / s[self.seg_of_row]
        G = np.add.reduceat(w[:, None] * self.E, self.starts, axis=0)
        return F, w, G

    def values_only(self, u: np.ndarray):
        z = self.E @ u + self.b
        mx = np.maximum.reduceat(z, self.starts)
        e = np.exp(z - mx[self.seg_of_row])
        return mx + np.log(np.add.reduceat(e, self.starts))


def _newton_barrier(stacked: _Stacked, u0, t0, mu, tol, max_newton):
    """Minimize t*F0(u) - sum log(-Fi(u)) along the central path."""
    m = stacked.m
    u = u0.copy()
    t = t0
    total_newton = 0
    last_decrement = np.inf
    while True:
        for _ in range(max_newton):
            F, w, G = stacked.eval(u)
            f0, fi = F[0], F[1:]
            if np.any(fi >= 0):
                raise GpSolverError("iterate left the feasible region")
            a = 1.0 / (-fi)
            grad = t * G[0] + G[1:].T @ a

            row_scale = np.concatenate([[t], a])[stacked.seg_of_row] * w
            H = (stacked.E * row_scale[:, None]).T @ stacked.E
            H -= t * np.outer(G[0], G[0])
            H += G[1:].T @ ((a * a - a)[:, None] * G[1:])

            try:
                step = np.linalg.solve(H + 1e-12 * np.eye(H.shape[0]), -grad)
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(H + 1e-9 * np.eye(H.shape[0]), -grad, rcond=None)[0]
            decrement = float(-grad @ step)
            last_decrement = decrement
            total_newton += 1
            if decrement < 2 * 1e-10:
                break

            # backtracking with domain check
            alpha = 1.0
            phi0 = t * f0 - np.sum(np.log(-fi))
            gdots = float(grad @ step)
            for _ in range(60):
                cand = u + alpha * step
                Fc = stacked.values_only(cand)
                if np.all(Fc[1:] < 0):
                    phic = t * Fc[0] - np.sum(np.log(-Fc[1:]))
                    if phic <= phi0 + 0.25 * alpha * gdots:
                        break
                alpha *= 0.5
            else:
                break  # line search hit the numerical floor; accept the point
            u = u + alpha * step
        else:
            raise GpSolverError(
                f"Newton did not converge (last decrement {last_decrement:.3e} at t={t:.3e})"
            )
        if m == 0 or m / t < tol:
            return u, t, total_newton
        t *= mu


def solve_gp(program: GpProgram, tol: float = 1e-8, start=None, mu: float = 10.0,
             max_newton: int = 200) -> GpSolution:
    """Solve a GP to duality gap <= tol (relative, via the log objective).

    `start` must be strictly feasible (the Slater point the caller owns,
    e.g. the previous GIA iterate); without one a phase-1 GP is solved first.
    """
    if program.n_vars == 0:
        raise GpError("program has no variables")
    stacked = _Stacked(program)
    if start is None:
        u0 = _phase1(program, stacked)
    else:
        u0 = np.log(np.asarray(start, dtype=float))
        if np.any(stacked.values_only(u0)[1:] >= 0):
            u0 = _phase1(program, stacked)

    m = stacked.m
    F = stacked.values_only(u0)
    t0 = max(1.0, m / max(abs(F[0]), 1.0))  # initial gap roughly the objective scale
    u, t, iters = _newton_barrier(stacked, u0, t0, mu, tol, max_newton)

    F, w, G = stacked.eval(u)
    duals = 1.0 / (t * (-F[1:])) if m else np.zeros(0)
    stat = G[0] + (G[1:].T @ duals if m else 0.0)
    kkt = max(float(np.max(np.abs(stat))), (1.0 / t if m else 0.0))
    return GpSolution(np.exp(u), float(np.exp(F[0])), duals, kkt, iters)


def _phase1(program: GpProgram, stacked: _Stacked) -> np.ndarray:
    """Find a strictly feasible point by minimizing a shared constraint slack.

    In GP form: add a variable tau, divide every constraint by it, minimize
    tau.  tau can start large enough to dominate every violation.
    """
    n = program.n_vars
    aug_obj = Posynomial([1.0], np.concatenate([np.zeros(n), [1.0]])[None, :])
    aug_cons = []
    for c in program.constraints:
        expos = np.hstack([c.expos, -np.ones((c.expos.shape[0], 1))])
        aug_cons.append(Posynomial(c.coeffs, expos))
    # tau >= 0.5 keeps the problem bounded without moving the verdict
    # threshold (feasible iff the optimal slack is < 1)
    aug_cons.append(Posynomial([0.5], np.concatenate([np.zeros(n), [-1.0]])[None, :]))
    aug = GpProgram(program.var_names + ["_tau"], aug_obj, aug_cons)
    stacked_aug = _Stacked(aug)

    u0 = np.zeros(n + 1)
    F = stacked_aug.values_only(u0)
    u0[-1] = float(np.max(F[1:-1])) + 1.0
    u, t, _ = _newton_barrier(stacked_aug, u0, t0=1.0, mu=10.0, tol=1e-6, max_newton=200)
    tau = float(np.exp(u[-1]))
    if tau >= 1.0:
        raise GpInfeasibleError(tau)
    # re-centre strictly inside the original region before handing back
    if np.any(stacked.values_only(u[:n])[1:] >= 0):
        raise GpInfeasibleError(tau)
    return u[:n]
