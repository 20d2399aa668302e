"""Stage subproblem compilers.

Each builder turns a stage Bellman subproblem into a mixed-integer
linear model: the stage feasible rows, the dual variables of the inner
worst-case problem, per-realization dual-feasibility rows against the
continuation proxies theta_t^k, pooled under-approximation cut rows, and
McCormick envelopes that linearize every product of a binary state entry
with a bounded dual.  Minimizing the compiled model therefore evaluates
the stage cost plus the worst case of the current continuation
approximation.

Type 1 carries moment-window duals (alpha, beta); Type 2 the matching
duals (s, u, Y) with bilinear w, z and trilinear v envelopes; Type 3 the
ellipsoid/cone duals (s, Z-blocks, Y) whose PSD side is NOT encoded
here -- the builders only return symbolic block descriptors for the
bounding module.  The optional risk blend adds the CVaR shift variable
and the per-realization reweighting duals, and reduces exactly to the
risk-neutral rows at a zero blend weight.

McCormick needs finite dual bounds; the default big-M is
1e4 * (1 + max revenue + max transport cost), and a post-solve audit
flags any dual sitting at its bound so callers can rerun with 10x M.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ambiguity import RiskSpec
from .lpmilp import LinearModel
from .misdp import PsdBlockRef
from .model import Instance, StageBlock, build_stage_block, revenue_lower_bound

DUAL_BOUND_FACTOR = 1e4
DUAL_BOUND_AUDIT_REL = 1e-6


class UnboundedFactor(ValueError):
    """McCormick factor has an infinite bound."""


class DualAtBound(RuntimeError):
    """A dual variable sits at its big-M bound: rerun with a larger bound."""

    def __init__(self, message: str, family: str = "", scale: float = 0.0):
        super().__init__(message)
        self.family = family
        self.scale = scale


@dataclass
class VarLayout:
    """Named column ranges of a compiled stage model."""

    x: np.ndarray
    y: np.ndarray
    theta: np.ndarray
    z_copy: np.ndarray | None
    families: dict[str, np.ndarray] = field(default_factory=dict)
    audit_families: tuple[str, ...] = ()
    dual_bound: float = 0.0

    def cost_value(self, inst: Instance, x_sol: np.ndarray) -> float:
        """Stage cost g_t of the flow part of a solution vector."""
        y_vals = np.asarray(x_sol)[self.y]
        return float(np.sum((inst.c - inst.R[None, :]) * y_vals))


def default_dual_bound(inst: Instance) -> float:
    return DUAL_BOUND_FACTOR * (1.0 + float(np.abs(inst.R).max())
                                + float(np.abs(inst.c).max()))


def mccormick_binary_product(model: LinearModel, b: int, y: int, z: int,
                             L: float, U: float) -> list[int]:
    """Envelope rows forcing z = b*y at binary b, for y in [L, U]."""
    if not (np.isfinite(L) and np.isfinite(U)):
        raise UnboundedFactor("McCormick factor bounds must be finite")
    rows = [
        model.add_row({z: 1.0, b: -U}, "<=", 0.0),
        model.add_row({z: 1.0, b: -L}, ">=", 0.0),
        model.add_row({z: 1.0, y: -1.0, b: -L}, "<=", -L),
        model.add_row({z: 1.0, y: -1.0, b: -U}, ">=", -U),
    ]
    return rows


def _start_layout(inst: Instance, block: StageBlock, theta: np.ndarray,
                  dual_bound: float) -> VarLayout:
    lay = VarLayout(x=block.x, y=block.y, theta=theta, z_copy=block.z_copy,
                    dual_bound=dual_bound)
    lay.families = {"x": block.x, "y": block.y, "theta": theta}
    if block.z_copy is not None:
        lay.families["z_copy"] = block.z_copy
    return lay


def _add_theta(inst: Instance, t: int, m: LinearModel) -> np.ndarray:
    return m.add_vars(inst.K, revenue_lower_bound(inst, t), np.inf, prefix="th_")


def _add_cut_rows(m: LinearModel, theta: np.ndarray, x: np.ndarray, cuts) -> None:
    if cuts is None:
        return
    for k, cut_list in enumerate(cuts):
        for v, pi in cut_list:
            coeffs = {int(theta[k]): 1.0}
            for i, col in enumerate(x):
                if pi[i] != 0.0:
                    coeffs[int(col)] = -float(pi[i])
            m.add_row(coeffs, ">=", float(v))


def _add_risk_columns(m: LinearModel, inst: Instance, lay: VarLayout) -> tuple[np.ndarray, int]:
    pi_cvar = m.add_vars(inst.K, 0.0, np.inf, prefix="pic_")
    shift = m.add_var(-np.inf, np.inf, name="cvar_shift")
    lay.families["pi_cvar"] = pi_cvar
    lay.families["cvar_shift"] = np.array([shift])
    return pi_cvar, shift


def _emit_value_rows(m: LinearModel, inst: Instance, theta: np.ndarray,
                     dual_coeffs_per_k, risk: RiskSpec | None,
                     pi_cvar, shift, shift_sign: float) -> None:
    """Dual-feasibility rows, with the two CVaR families when risk is on.

    shift_sign encodes the printed convention of the risk theorems: the
    moment-window form carries +lam*shift and rows pi_k + shift >= theta_k;
    the matching/cone forms carry -lam*shift and rows pi_k - shift >= theta_k.
    """
    K = inst.K
    for k in range(K):
        coeffs = dict(dual_coeffs_per_k[k])
        if risk is None:
            coeffs[int(theta[k])] = coeffs.get(int(theta[k]), 0.0) - 1.0
            m.add_row(coeffs, ">=", 0.0, name=f"dual_{k}")
        else:
            ratio = risk.lam / (1.0 - risk.alpha)
            coeffs[int(pi_cvar[k])] = -ratio
            coeffs[int(theta[k])] = -(1.0 - risk.lam)
            m.add_row(coeffs, ">=", 0.0, name=f"dual_{k}")
            m.add_row({int(pi_cvar[k]): 1.0, shift: shift_sign,
                       int(theta[k]): -1.0}, ">=", 0.0, name=f"cvar_{k}")


def build_type1_stage(inst: Instance, t: int, x_prev, xi, cuts=None,
                      risk: RiskSpec | None = None, *, x_prev_as_copy: bool = False,
                      dual_bound: float | None = None,
                      include_prob_bound_duals: bool = False
                      ) -> tuple[LinearModel, VarLayout]:
    """Moment-window stage model (mean/second-moment windows per coordinate)."""
    _check_not_terminal(inst, t)
    M = default_dual_bound(inst) if dual_bound is None else float(dual_bound)
    block = build_stage_block(inst, t, x_prev, xi, x_prev_as_copy=x_prev_as_copy)
    m, x = block.model, block.x
    I, J, K = inst.I, inst.J, inst.K
    theta = _add_theta(inst, t, m)
    lay = _start_layout(inst, block, theta, M)
    s_base = inst.mu_bar**2 + inst.sigma_bar**2
    a1 = m.add_var(0.0, np.inf, obj=-1.0, name="al1")
    b1 = m.add_var(0.0, np.inf, obj=1.0, name="be1")
    a2 = m.add_vars(J, 0.0, M, prefix="al2_")
    a3 = m.add_vars(J, 0.0, M, prefix="al3_")
    b2 = m.add_vars(J, 0.0, M, prefix="be2_")
    b3 = m.add_vars(J, 0.0, M, prefix="be3_")
    for j in range(J):
        m.set_objective(int(a2[j]), -(inst.mu_bar[j] - inst.eps_mu[j]))
        m.set_objective(int(a3[j]), -s_base[j] * inst.eps_S_lo[j])
        m.set_objective(int(b2[j]), inst.mu_bar[j] + inst.eps_mu[j])
        m.set_objective(int(b3[j]), s_base[j] * inst.eps_S_hi[j])
    prods = {}
    for fam, factor, sign, weight in (
        ("z_a2", a2, -1.0, inst.lambda_mu * inst.mu_bar[:, None]),
        ("z_a3", a3, -1.0, inst.lambda_S * (inst.eps_S_lo * s_base)[:, None]),
        ("z_b2", b2, 1.0, inst.lambda_mu * inst.mu_bar[:, None]),
        ("z_b3", b3, 1.0, inst.lambda_S * (inst.eps_S_hi * s_base)[:, None]),
    ):
        cols = np.empty((J, I), dtype=int)
        for j in range(J):
            for i in range(I):
                cols[j, i] = m.add_var(0.0, M, obj=sign * float(weight[j, i]),
                                       name=f"{fam}_{j}_{i}")
                mccormick_binary_product(m, int(x[i]), int(factor[j]),
                                         int(cols[j, i]), 0.0, M)
        prods[fam] = cols
    lay.families.update({"alpha1": np.array([a1]), "beta1": np.array([b1]),
                         "alpha2": a2, "alpha3": a3, "beta2": b2, "beta3": b3,
                         **prods})
    lay.audit_families = ("alpha2", "alpha3", "beta2", "beta3")

    xi_next = inst.stage_support(t + 1)
    gam_lo = gam_hi = None
    if include_prob_bound_duals:
        gam_lo = m.add_vars(K, 0.0, np.inf, prefix="gl_")
        gam_hi = m.add_vars(K, 0.0, np.inf, prefix="gh_")
        for k in range(K):
            m.set_objective(int(gam_hi[k]), 1.0)  # upper probability bound is 1
        lay.families.update({"gamma_lo": gam_lo, "gamma_hi": gam_hi})
    dual_coeffs = []
    for k in range(K):
        coeffs = {a1: -1.0, b1: 1.0}
        for j in range(J):
            coeffs[int(a2[j])] = -xi_next[k, j]
            coeffs[int(b2[j])] = xi_next[k, j]
            coeffs[int(a3[j])] = -(xi_next[k, j] ** 2)
            coeffs[int(b3[j])] = xi_next[k, j] ** 2
        if include_prob_bound_duals:
            coeffs[int(gam_lo[k])] = -1.0
            coeffs[int(gam_hi[k])] = 1.0
        dual_coeffs.append(coeffs)
    pi_cvar = shift = None
    if risk is not None:
        pi_cvar, shift = _add_risk_columns(m, inst, lay)
        m.set_objective(shift, risk.lam)
    _emit_value_rows(m, inst, theta, dual_coeffs, risk, pi_cvar, shift, 1.0)
    _add_cut_rows(m, theta, x, cuts)
    return m, lay


def _quadratic_value_coeffs(inst: Instance, xi_k: np.ndarray, Y: np.ndarray,
                            prod: np.ndarray, tri: np.ndarray) -> dict[int, float]:
    """Coefficients of (xi - mu(x))(xi - mu(x))' . Y with the binary
    products substituted: prod[i,j,jp] = x_i Y[j,jp], tri[i,ip,j,jp] =
    x_i x_ip Y[j,jp]."""
    J, I = inst.J, inst.I
    mu_b = inst.mu_bar
    lam = inst.lambda_mu
    coeffs: dict[int, float] = {}

    def bump(col, val):
        if val != 0.0:
            c = int(col)
            coeffs[c] = coeffs.get(c, 0.0) + float(val)

    for j in range(J):
        for jp in range(J):
            bump(Y[j, jp], xi_k[j] * xi_k[jp])
            t1 = xi_k[j] * mu_b[jp]
            bump(Y[j, jp], -t1)
            bump(Y[jp, j], -t1)
            for i in range(I):
                r = lam[jp, i] * t1
                bump(prod[i, jp, j], -r)
                bump(prod[i, j, jp], -r)
            t2 = mu_b[j] * mu_b[jp]
            bump(Y[j, jp], t2)
            for i in range(I):
                bump(prod[i, j, jp], (lam[j, i] + lam[jp, i]) * t2)
                for ip in range(I):
                    bump(tri[i, ip, j, jp], lam[j, i] * lam[jp, ip] * t2)
    return coeffs


def _matrix_vars(m: LinearModel, shape, lb, ub, prefix) -> np.ndarray:
    cols = np.empty(shape, dtype=int)
    for idx in np.ndindex(*shape):
        cols[idx] = m.add_var(lb, ub, name=prefix + "_".join(map(str, idx)))
    return cols


def _symmetry_rows(m: LinearModel, cols: np.ndarray, tag: str) -> None:
    n = cols.shape[0]
    for j in range(n):
        for jp in range(j + 1, n):
            m.add_row({int(cols[j, jp]): 1.0, int(cols[jp, j]): -1.0}, "=", 0.0,
                      name=f"sym_{tag}_{j}_{jp}")


def build_type2_stage(inst: Instance, t: int, x_prev, xi, cuts=None,
                      risk: RiskSpec | None = None, *, x_prev_as_copy: bool = False,
                      dual_bound: float | None = None,
                      symmetry_rows: bool = True) -> tuple[LinearModel, VarLayout]:
    """Exact moment-matching stage model (duals s, u, Y; products w, z, v)."""
    _check_not_terminal(inst, t)
    M = default_dual_bound(inst) if dual_bound is None else float(dual_bound)
    block = build_stage_block(inst, t, x_prev, xi, x_prev_as_copy=x_prev_as_copy)
    m, x = block.model, block.x
    I, J, K = inst.I, inst.J, inst.K
    theta = _add_theta(inst, t, m)
    lay = _start_layout(inst, block, theta, M)
    sig = inst.Sigma_bar.entries
    s = m.add_var(-np.inf, np.inf, obj=1.0, name="s")
    u = _matrix_vars(m, (J,), -M, M, "u_")
    Y = _matrix_vars(m, (J, J), -M, M, "Y_")
    w = _matrix_vars(m, (I, J), -M, M, "w_")
    zz = _matrix_vars(m, (I, J, J), -M, M, "z_")
    v = _matrix_vars(m, (I, I, J, J), -M, M, "v_")
    for j in range(J):
        m.set_objective(int(u[j]), float(inst.mu_bar[j]))
        for jp in range(J):
            m.set_objective(int(Y[j, jp]), float(sig[j, jp]))
    for i in range(I):
        for j in range(J):
            m.set_objective(int(w[i, j]), float(inst.mu_bar[j] * inst.lambda_mu[j, i]))
            mccormick_binary_product(m, int(x[i]), int(u[j]), int(w[i, j]), -M, M)
            for jp in range(J):
                m.set_objective(int(zz[i, j, jp]), float(sig[j, jp] * inst.lambda_cov[i]))
                mccormick_binary_product(m, int(x[i]), int(Y[j, jp]),
                                         int(zz[i, j, jp]), -M, M)
                for ip in range(I):
                    mccormick_binary_product(m, int(x[ip]), int(zz[i, j, jp]),
                                             int(v[i, ip, j, jp]), -M, M)
    if symmetry_rows:
        _symmetry_rows(m, Y, "Y")
    lay.families.update({"s": np.array([s]), "u": u, "Y": Y, "w": w, "z": zz, "v": v})
    lay.audit_families = ("u", "Y")
    xi_next = inst.stage_support(t + 1)
    dual_coeffs = []
    for k in range(K):
        coeffs = _quadratic_value_coeffs(inst, xi_next[k], Y, zz, v)
        coeffs[s] = 1.0
        for j in range(J):
            coeffs[int(u[j])] = coeffs.get(int(u[j]), 0.0) + xi_next[k, j]
        dual_coeffs.append(coeffs)
    pi_cvar = shift = None
    if risk is not None:
        pi_cvar, shift = _add_risk_columns(m, inst, lay)
        m.set_objective(shift, -risk.lam)
    _emit_value_rows(m, inst, theta, dual_coeffs, risk, pi_cvar, shift, -1.0)
    _add_cut_rows(m, theta, x, cuts)
    return m, lay


def build_type3_stage(inst: Instance, t: int, x_prev, xi, cuts=None,
                      risk: RiskSpec | None = None, *, x_prev_as_copy: bool = False,
                      dual_bound: float | None = None
                      ) -> tuple[LinearModel, VarLayout, list[PsdBlockRef]]:
    """Ellipsoid/cone stage model; PSD is left to the bounding module.

    Returns block descriptors for Z = [[z1, z2], [z2', z3]] and Y.
    """
    _check_not_terminal(inst, t)
    M = default_dual_bound(inst) if dual_bound is None else float(dual_bound)
    block = build_stage_block(inst, t, x_prev, xi, x_prev_as_copy=x_prev_as_copy)
    m, x = block.model, block.x
    I, J, K = inst.I, inst.J, inst.K
    theta = _add_theta(inst, t, m)
    lay = _start_layout(inst, block, theta, M)
    sig = inst.Sigma_bar.entries
    eta = inst.eta_cov
    s = m.add_var(-np.inf, np.inf, obj=1.0, name="s")
    z1 = _matrix_vars(m, (J, J), -M, M, "z1_")
    z2 = _matrix_vars(m, (J,), -M, M, "z2_")
    z3 = m.add_var(0.0, np.inf, obj=float(inst.gamma), name="z3")
    Y = _matrix_vars(m, (J, J), -M, M, "Y3_")
    w3 = _matrix_vars(m, (I, J, J), -M, M, "w3_")
    u3 = _matrix_vars(m, (I, J), -M, M, "u3_")
    r3 = _matrix_vars(m, (I, J, J), -M, M, "R3_")
    v3 = _matrix_vars(m, (I, I, J, J), -M, M, "v3_")
    for j in range(J):
        m.set_objective(int(z2[j]), -2.0 * inst.mu_bar[j])
        m.set_bounds(int(z1[j, j]), 0.0, M)  # PSD diagonal
        m.set_bounds(int(Y[j, j]), 0.0, M)
        for jp in range(J):
            m.set_objective(int(z1[j, jp]), float(sig[j, jp]))
            m.set_objective(int(Y[j, jp]), eta * float(sig[j, jp]))
    for i in range(I):
        for j in range(J):
            m.set_objective(int(u3[i, j]), -2.0 * inst.mu_bar[j] * inst.lambda_mu[j, i])
            mccormick_binary_product(m, int(x[i]), int(z2[j]), int(u3[i, j]), -M, M)
            for jp in range(J):
                m.set_objective(int(w3[i, j, jp]),
                                float(sig[j, jp] * inst.lambda_cov[i]))
                m.set_objective(int(r3[i, j, jp]),
                                eta * float(sig[j, jp] * inst.lambda_cov[i]))
                mccormick_binary_product(m, int(x[i]), int(z1[j, jp]),
                                         int(w3[i, j, jp]), -M, M)
                mccormick_binary_product(m, int(x[i]), int(Y[j, jp]),
                                         int(r3[i, j, jp]), -M, M)
                for ip in range(I):
                    mccormick_binary_product(m, int(x[ip]), int(r3[i, j, jp]),
                                             int(v3[i, ip, j, jp]), -M, M)
    _symmetry_rows(m, z1, "z1")
    _symmetry_rows(m, Y, "Y3")
    lay.families.update({"s": np.array([s]), "z1": z1, "z2": z2,
                         "z3": np.array([z3]), "Y": Y, "w": w3, "u": u3,
                         "R": r3, "v": v3})
    lay.audit_families = ("z1", "z2", "Y")
    xi_next = inst.stage_support(t + 1)
    dual_coeffs = []
    for k in range(K):
        coeffs = _quadratic_value_coeffs(inst, xi_next[k], Y, r3, v3)
        coeffs[s] = 1.0
        for j in range(J):
            coeffs[int(z2[j])] = coeffs.get(int(z2[j]), 0.0) - 2.0 * xi_next[k, j]
        dual_coeffs.append(coeffs)
    pi_cvar = shift = None
    if risk is not None:
        pi_cvar, shift = _add_risk_columns(m, inst, lay)
        m.set_objective(shift, -risk.lam)
    _emit_value_rows(m, inst, theta, dual_coeffs, risk, pi_cvar, shift, -1.0)
    _add_cut_rows(m, theta, x, cuts)
    zdim = J + 1
    zcols = np.empty((zdim, zdim), dtype=int)
    zcols[:J, :J] = z1
    zcols[:J, J] = z2
    zcols[J, :J] = z2
    zcols[J, J] = z3
    blocks = [PsdBlockRef("Z", zdim, zcols), PsdBlockRef("Y", J, Y.copy())]
    return m, lay, blocks


def build_stage(inst: Instance, ttype: int, t: int, x_prev, xi, cuts=None,
                risk: RiskSpec | None = None, **kwargs):
    """Dispatch on ambiguity type; returns (model, layout, psd_blocks)."""
    if int(ttype) == 1:
        m, lay = build_type1_stage(inst, t, x_prev, xi, cuts, risk, **kwargs)
        return m, lay, []
    if int(ttype) == 2:
        m, lay = build_type2_stage(inst, t, x_prev, xi, cuts, risk, **kwargs)
        return m, lay, []
    if int(ttype) == 3:
        return build_type3_stage(inst, t, x_prev, xi, cuts, risk, **kwargs)
    raise ValueError(f"unknown ambiguity type {ttype}")


def _check_not_terminal(inst: Instance, t: int) -> None:
    if not 1 <= t < inst.T:
        raise ValueError(f"stage {t} has no continuation (T={inst.T})")


def audit_dual_bounds(layout: VarLayout, x_sol: np.ndarray) -> None:
    """Raise DualAtBound if any audited dual sits within 1e-6*M of its bound."""
    M = layout.dual_bound
    tol = DUAL_BOUND_AUDIT_REL * M
    for fam in layout.audit_families:
        vals = np.asarray(x_sol)[layout.families[fam]]
        if np.any(np.abs(vals) >= M - tol):
            raise DualAtBound(
                f"dual family {fam} at its bound {M:g}; rerun with 10x bound",
                family=fam, scale=M)


def freeze_stage(inst: Instance, ttype: int, t: int, x, q,
                 risk: RiskSpec | None = None, dual_bound: float | None = None):
    """Stage model with the state frozen at x, flows at zero, and the
    continuation proxies pinned to q: its optimum is the dual-side value
    of the inner worst-case problem at x (for Types 1-2; Type 3 still
    needs PSD handling on the returned blocks)."""
    x = np.asarray(x, dtype=float)
    model, lay, blocks = build_stage(inst, ttype, t, x, np.zeros(inst.J),
                                     cuts=None, risk=risk, dual_bound=dual_bound)
    q = np.asarray(q, dtype=float)
    for i, col in enumerate(lay.x):
        model.set_bounds(int(col), x[i], x[i])
    for col in lay.y.ravel():
        model.set_bounds(int(col), 0.0, 0.0)
    for k, col in enumerate(lay.theta):
        model.set_bounds(int(col), q[k], q[k])
    return model, lay, blocks


def frozen_dual_value(inst: Instance, ttype: int, t: int, x, q,
                      risk: RiskSpec | None = None,
                      dual_bound: float | None = None) -> float:
    """Dual-side worst-case value at frozen x (Types 1-2).

    A dual resting on the big-M box is accepted when a 10x-box probe
    leaves the value unchanged (flat optimal face); a value-improving
    probe escalates the bound.
    """
    from .lpmilp import solve_milp

    if int(ttype) not in (1, 2):
        raise ValueError("frozen dual values without PSD handling need type 1 or 2")
    bound = default_dual_bound(inst) if dual_bound is None else float(dual_bound)
    for _ in range(4):
        model, lay, _ = freeze_stage(inst, ttype, t, x, q, risk, bound)
        sol = solve_milp(model)
        if sol.status != "Optimal":
            raise RuntimeError(f"frozen dual solve returned {sol.status}")
        try:
            audit_dual_bounds(lay, sol.x)
            return float(sol.objective)
        except DualAtBound:
            probe_model, _, _ = freeze_stage(inst, ttype, t, x, q, risk, bound * 10.0)
            probe = solve_milp(probe_model)
            if (probe.status == "Optimal" and
                    abs(probe.objective - sol.objective)
                    <= 1e-7 * max(1.0, abs(sol.objective))):
                return float(sol.objective)
            bound *= 10.0
    raise DualAtBound(f"dual bound {bound:g} still binding after escalations")
