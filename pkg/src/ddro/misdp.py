"""PSD handling for the Type 3 stage subproblems.

Two complementary routes around the mixed-integer SDP:

* a lower-bound route that outer-approximates the PSD cones inside
  branch-and-bound: solve the MILP, check the smallest eigenvalue of
  each matrix block at the incumbent, and append the eigenvector row
  v' M v >= 0 until every block clears the tolerance; and

* an upper-bound route that inner-approximates each cone by the set of
  matrices U' Q U with Q diagonally dominant, which is plain linear
  rows once U is fixed (identity by default).

Outer rows are valid for every integer assignment (they are linear in
the block entries and independent of the binaries), so they are kept
globally rather than per node.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import linalg
from .linalg import SymMatrix, min_eigenpair
from .lpmilp import (DEFAULT_CONFIG, OPTIMAL, LinearModel, MipSolution,
                     SolverConfig, solve_milp)

EIGEN_CUT_TOL = 1e-6
MAX_CUT_ROUNDS_OUTER = 1000
SANDWICH_REL_SLACK = 1e-6
CONDITION_LIMIT = 1e12


class CutLoopLimit(RuntimeError):
    """Outer-approximation cut loop hit its round limit."""

    def __init__(self, message: str, best: MipSolution | None = None):
        super().__init__(message)
        self.best = best


class SingularBasis(ValueError):
    """DD basis matrix is numerically singular."""


@dataclass(frozen=True)
class PsdBlockRef:
    """Column map of one symmetric matrix block inside a LinearModel."""

    name: str
    dim: int
    cols: np.ndarray  # (dim, dim) int array of column ids

    def assemble(self, x: np.ndarray) -> SymMatrix:
        return SymMatrix.from_array(x[self.cols], asym_tol=1e-5)

    def quadratic_form_coeffs(self, v: np.ndarray) -> dict[int, float]:
        """Coefficients of v' M v as a linear row over the block columns."""
        coeffs: dict[int, float] = {}
        for a in range(self.dim):
            for b in range(self.dim):
                col = int(self.cols[a, b])
                coeffs[col] = coeffs.get(col, 0.0) + float(v[a] * v[b])
        return coeffs


def eigen_cut_rows(model: LinearModel, blocks, x: np.ndarray,
                   tol: float = EIGEN_CUT_TOL) -> int:
    """Append v' M v >= 0 for every block violating the PSD tolerance."""
    added = 0
    for block in blocks:
        lam, v = min_eigenpair(block.assemble(x))
        if lam < -tol:
            model.add_row(block.quadratic_form_coeffs(v), ">=", 0.0,
                          name=f"eig_{block.name}_{model.num_rows}")
            added += 1
    return added


def solve_misdp_outer(model: LinearModel, blocks, tol: float = EIGEN_CUT_TOL,
                      config: SolverConfig = DEFAULT_CONFIG,
                      max_rounds: int = MAX_CUT_ROUNDS_OUTER) -> MipSolution:
    """Eigen-cut outer approximation loop; the returned objective is a
    valid lower bound on the MISDP optimum (exact in the cut-loop limit).

    The model is mutated in place: appended rows stay valid and carry
    over to subsequent solves with different objectives over the same
    feasible set.
    """
    sol = None
    for _ in range(max_rounds):
        sol = solve_milp(model, config)
        if sol.status != OPTIMAL:
            return sol
        if eigen_cut_rows(model, blocks, sol.x, tol) == 0:
            return sol
    raise CutLoopLimit(f"no PSD convergence after {max_rounds} rounds", best=sol)


def add_dd_inner(model: LinearModel, blocks, U: SymMatrix, V: SymMatrix) -> LinearModel:
    """Copy of the model with Z in DD(U) and Y in DD(V) rows.

    Introduces a symmetric factor matrix per block (split into
    nonnegative parts) with rows block = basis' Q basis and the
    diagonal-dominance rows on Q.  Every feasible point then has PSD
    blocks, so the optimum is a valid upper bound on the MISDP optimum.
    """
    return add_dd_inner_general(model, blocks, [U.entries, V.entries])


def add_dd_inner_general(model: LinearModel, blocks, bases) -> LinearModel:
    """add_dd_inner for general (possibly non-symmetric) square bases.

    The iterated-Cholesky mode routes here: a Cholesky factor is
    triangular, which the SymMatrix container cannot carry.
    """
    out = model.copy()
    for block, basis in zip(blocks, bases):
        basis = np.asarray(basis, dtype=float)
        if basis.shape != (block.dim, block.dim):
            raise ValueError(f"basis shape {basis.shape} != block dimension {block.dim}")
        _check_condition(basis)
        _add_dd_rows(out, block, basis)
    return out


def _check_condition(basis: np.ndarray) -> None:
    gram = SymMatrix.from_array(basis.T @ basis, asym_tol=1e-6)
    lams = np.array([lam for lam, _ in linalg.sym_eig(gram)])
    small, big = float(lams.min()), float(lams.max())
    if small <= 0 or np.sqrt(big / small) > CONDITION_LIMIT:
        raise SingularBasis(f"basis condition estimate exceeds {CONDITION_LIMIT:g}")


def _add_dd_rows(m: LinearModel, block: PsdBlockRef, u: np.ndarray) -> None:
    d = block.dim
    tag = block.name
    diag = m.add_vars(d, 0.0, np.inf, prefix=f"qd_{tag}_")
    qp: dict[tuple[int, int], int] = {}
    qm: dict[tuple[int, int], int] = {}
    for a in range(d):
        for b in range(a + 1, d):
            qp[a, b] = m.add_var(0.0, np.inf, name=f"qp_{tag}_{a}_{b}")
            qm[a, b] = m.add_var(0.0, np.inf, name=f"qm_{tag}_{a}_{b}")

    def q_terms(cc: int, dd_: int) -> list[tuple[int, float]]:
        if cc == dd_:
            return [(int(diag[cc]), 1.0)]
        key = (min(cc, dd_), max(cc, dd_))
        return [(qp[key], 1.0), (qm[key], -1.0)]

    # block[a, b] = (u' Q u)[a, b] over the symmetric factor Q
    for a in range(d):
        for b in range(a, d):
            coeffs: dict[int, float] = {int(block.cols[a, b]): -1.0}
            for cc in range(d):
                for dd_ in range(cc, d):
                    w = u[cc, a] * u[dd_, b]
                    if cc != dd_:
                        w += u[dd_, a] * u[cc, b]
                    if w == 0.0:
                        continue
                    for col, sgn in q_terms(cc, dd_):
                        coeffs[col] = coeffs.get(col, 0.0) + sgn * w
            m.add_row(coeffs, "=", 0.0, name=f"ddfac_{tag}_{a}_{b}")
    # diagonal dominance on Q via the absolute-value split
    for a in range(d):
        coeffs = {int(diag[a]): 1.0}
        for b in range(d):
            if b == a:
                continue
            key = (min(a, b), max(a, b))
            coeffs[qp[key]] = coeffs.get(qp[key], 0.0) - 1.0
            coeffs[qm[key]] = coeffs.get(qm[key], 0.0) - 1.0
        m.add_row(coeffs, ">=", 0.0, name=f"dd_{tag}_{a}")


def dd_basis_from_incumbent(block_value: SymMatrix, ridge: float = 1e-9) -> np.ndarray:
    """Next DD basis from a block incumbent: transpose Cholesky factor.

    The incumbent is ridged up to tolerate the outer loop's slightly
    indefinite blocks; with basis u = L', the incumbent itself lies in
    DD(u) since L L' = u' I u and the identity is diagonally dominant.
    """
    lam = min_eigenpair(block_value)[0]
    shift = max(0.0, -lam) + ridge
    lifted = SymMatrix(block_value.entries + shift * np.eye(block_value.n))
    return linalg.cholesky(lifted).T


def run_type3_bounds(inst, config=None):
    """Lower and upper bound runs for the Type 3 model; asserts lb <= ub."""
    from . import sddip  # runtime import: sddip builds on this module

    cfg = config if config is not None else sddip.SddipConfig()
    t0 = time.perf_counter()
    lb_report = sddip.run(inst, 3, sddip.replace_config(cfg, bound_mode="lb"))
    ub_report = sddip.run(inst, 3, sddip.replace_config(cfg, bound_mode="ub"))
    lb = lb_report.lb_per_iter[-1]
    ub = ub_report.ub_estimate
    if lb > ub + SANDWICH_REL_SLACK * max(1.0, abs(ub)):
        raise AssertionError(f"bound sandwich violated: lb={lb} > ub={ub}")
    lb_report.wall_time = time.perf_counter() - t0
    return lb_report, ub_report
