"""Exact oracles: dense two-phase simplex, the binary-IV sharp-bound LP over
response types, and the midpoint discretizer used for continuous comparisons.

The response-type formulation keeps one mechanism for every linear functional
of the counterfactual table: 16 variables q[r, o] where r indexes the
treatment response to the instrument and o the outcome response to treatment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InfeasibleError(Exception):
    def __init__(self, message, best_violation=None):
        super().__init__(message)
        self.best_violation = best_violation


class UnboundedError(Exception):
    pass


class RangeError(Exception):
    pass


class SizeError(Exception):
    pass


@dataclass
class LpProblem:
    """min c.x  s.t.  A_eq x = b_eq,  A_ub x <= b_ub,  x >= lower (default 0)."""

    c: np.ndarray
    a_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    a_ub: np.ndarray | None = None
    b_ub: np.ndarray | None = None
    lower: np.ndarray | None = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        for name in ("a_eq", "b_eq", "a_ub", "b_ub", "lower"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, np.asarray(v, dtype=float))
        n = self.c.size
        if self.a_eq is not None and self.a_eq.shape[1] != n:
            raise ValueError("A_eq width mismatch")
        if self.a_ub is not None and self.a_ub.shape[1] != n:
            raise ValueError("A_ub width mismatch")
        for m in (self.c, self.a_eq, self.b_eq, self.a_ub, self.b_ub, self.lower):
            if m is not None and not np.all(np.isfinite(m)):
                raise ValueError("LP entries must be finite")


@dataclass
class LpResult:
    value: float
    x: np.ndarray
    dual_eq: np.ndarray
    dual_ub: np.ndarray
    iterations: int = 0


_TOL = 1e-9


def simplex_solve(p: LpProblem) -> LpResult:
    """Dense two-phase simplex; Dantzig pricing with Bland fallback on stalls."""
    n = p.c.size
    lower = p.lower if p.lower is not None else np.zeros(n)
    # shift x = y + lower so y >= 0
    c = p.c.copy()
    rows = []
    rhs = []
    kinds = []  # "eq" | "ub"
    if p.a_eq is not None:
        for i in range(p.a_eq.shape[0]):
            rows.append(p.a_eq[i])
            rhs.append(p.b_eq[i] - p.a_eq[i] @ lower)
            kinds.append("eq")
    if p.a_ub is not None:
        for i in range(p.a_ub.shape[0]):
            rows.append(p.a_ub[i])
            rhs.append(p.b_ub[i] - p.a_ub[i] @ lower)
            kinds.append("ub")
    m = len(rows)
    if m == 0:
        raise ValueError("LP needs at least one constraint")
    a = np.array(rows, dtype=float)
    b = np.array(rhs, dtype=float)

    n_slack = sum(1 for k in kinds if k == "ub")
    total = n + n_slack + m  # structural + slack + artificial
    tab = np.zeros((m, total))
    tab[:, :n] = a
    si = 0
    slack_col = {}
    for i, k in enumerate(kinds):
        if k == "ub":
            tab[i, n + si] = 1.0
            slack_col[i] = n + si
            si += 1
    # make rhs nonnegative, remembering which rows were flipped
    flip = np.ones(m)
    for i in range(m):
        if b[i] < 0:
            tab[i] *= -1.0
            b[i] *= -1.0
            flip[i] = -1.0
    art_cols = []
    for i in range(m):
        col = n + n_slack + i
        tab[i, col] = 1.0
        art_cols.append(col)

    basis = list(art_cols)

    def pivot(tableau, rhs_vec, basis_list, row, col):
        piv = tableau[row, col]
        tableau[row] /= piv
        rhs_vec[row] /= piv
        factors = tableau[:, col].copy()
        factors[row] = 0.0
        tableau -= np.outer(factors, tableau[row])
        rhs_vec -= factors * rhs_vec[row]
        basis_list[row] = col

    def run_phase(cost, allowed_hi, tableau, rhs_vec, basis_list):
        """Pivot until optimal; entering columns restricted to [:allowed_hi].

        The reduced-cost row is carried in the tableau and updated by the same
        rank-1 elimination as the constraint rows, so pricing is O(columns).
        """
        iters = 0
        stall = 0
        bland_after = 4 * (tableau.shape[0] + allowed_hi)
        max_iters = 200 * (tableau.shape[0] + allowed_hi)
        reduced = cost - cost[basis_list] @ tableau
        while True:
            iters += 1
            if iters > max_iters:
                raise RuntimeError("simplex iteration cap exceeded")
            head = reduced[:allowed_hi]
            use_bland = stall > bland_after
            if use_bland:
                negs = np.nonzero(head < -_TOL)[0]
                if negs.size == 0:
                    return iters
                col = int(negs[0])
            else:
                col = int(np.argmin(head))
                if head[col] >= -_TOL:
                    return iters
            colvals = tableau[:, col]
            mask = colvals > _TOL
            if not np.any(mask):
                raise UnboundedError("objective unbounded below")
            ratios = np.full(tableau.shape[0], np.inf)
            ratios[mask] = rhs_vec[mask] / colvals[mask]
            row = int(np.argmin(ratios))
            if use_bland:
                best = ratios[row]
                cands = np.nonzero(ratios <= best + _TOL)[0]
                row = int(min(cands, key=lambda r: basis_list[r]))
            if rhs_vec[row] <= _TOL:
                stall += 1
            else:
                stall = 0
            pivot(tableau, rhs_vec, basis_list, row, col)
            reduced -= reduced[col] * tableau[row]

    # phase 1: drive out artificials (they may leave but never re-enter)
    cost1 = np.zeros(total)
    cost1[art_cols] = 1.0
    it1 = run_phase(cost1, n + n_slack, tab, b, basis)
    phase1_val = cost1[basis] @ b
    if phase1_val > 1e-7:
        raise InfeasibleError(f"phase-1 optimum {phase1_val:.3e} > 0: infeasible",
                              best_violation=float(phase1_val))
    # pivot remaining artificials out (or drop redundant rows)
    keep = np.ones(m, dtype=bool)
    for i in range(m):
        if basis[i] in art_cols:
            sub = np.abs(tab[i, :n + n_slack])
            j = int(np.argmax(sub))
            if sub[j] > _TOL:
                pivot(tab, b, basis, i, j)
            else:
                keep[i] = False
    if not np.all(keep):
        tab = tab[keep]
        b = b[keep]
        basis = [bb for bb, k in zip(basis, keep) if k]
        m = tab.shape[0]

    # phase 2 over structural + slack columns only
    cost2 = np.zeros(total)
    cost2[:n] = c
    it2 = run_phase(cost2, n + n_slack, tab, b, basis)

    y = np.zeros(n)
    for i, col in enumerate(basis):
        if col < n:
            y[col] = b[i]
    x = y + lower

    # duals: the artificial block started as the identity on the (flipped)
    # rows, so after pivoting it holds B^{-1} and c_B @ B^{-1} gives the duals
    # of the flipped system; undo the flips to report original-row duals
    cb = cost2[basis]
    dual_rows = (cb @ tab[:, n + n_slack:]) * flip
    dual_eq = np.array([dual_rows[i] for i, k in enumerate(kinds) if k == "eq"])
    dual_ub = np.array([dual_rows[i] for i, k in enumerate(kinds) if k == "ub"])
    value = float(c @ x)
    return LpResult(value=value, x=x, dual_eq=dual_eq, dual_ub=dual_ub,
                    iterations=it1 + it2)


# --------------------------------------------------------------------------
# Balke-Pearl response-type LP for binary IV
# --------------------------------------------------------------------------

def _t_of_z(r, z):
    # r encodes (T at z=0, T at z=1) as two bits
    return (r >> z) & 1


def _y_of_t(o, t):
    return (o >> t) & 1


@dataclass
class ResponseTypeDist:
    """Joint distribution over (compliance type, outcome type), 16 masses."""

    q: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).reshape(4, 4)
        if np.any(self.q < -1e-12):
            raise ValueError("response-type masses must be nonnegative")
        if abs(self.q.sum() - 1.0) > 1e-9:
            raise ValueError("response-type masses must sum to 1")

    def observational_table(self):
        """P(T=t, Y=y | Z=z) implied by the response types."""
        tab = np.zeros((2, 2, 2))  # [z, t, y]
        for r in range(4):
            for o in range(4):
                for z in range(2):
                    t = _t_of_z(r, z)
                    y = _y_of_t(o, t)
                    tab[z, t, y] += self.q[r, o]
        return tab

    def ate(self) -> float:
        val = 0.0
        for r in range(4):
            for o in range(4):
                val += self.q[r, o] * (_y_of_t(o, 1) - _y_of_t(o, 0))
        return val


def _response_constraints(p_obs):
    """8 equality rows sending q (flattened 16) to the observational table."""
    rows, rhs = [], []
    for z in range(2):
        for t in range(2):
            for y in range(2):
                row = np.zeros(16)
                for r in range(4):
                    if _t_of_z(r, z) != t:
                        continue
                    for o in range(4):
                        if _y_of_t(o, t) == y:
                            row[4 * r + o] = 1.0
                rows.append(row)
                rhs.append(p_obs[z, t, y])
    rows.append(np.ones(16))
    rhs.append(1.0)
    return np.array(rows), np.array(rhs)


def _ate_cost():
    c = np.zeros(16)
    for r in range(4):
        for o in range(4):
            c[4 * r + o] = _y_of_t(o, 1) - _y_of_t(o, 0)
    return c


def balke_pearl_bounds(p_obs) -> tuple[float, float]:
    """Sharp ATE bounds for binary (Z, T, Y) from P(T, Y | Z).

    ``p_obs[z, t, y]`` must be nonnegative and sum to 1 for each z.  Raises
    InfeasibleError when the table violates the instrumental inequalities.
    """
    p_obs = np.asarray(p_obs, dtype=float)
    if p_obs.shape != (2, 2, 2):
        raise ValueError("table must have shape (2, 2, 2) for [z, t, y]")
    if np.any(p_obs < -1e-12):
        raise ValueError("table entries must be nonnegative")
    for z in range(2):
        if abs(p_obs[z].sum() - 1.0) > 1e-6:
            raise ValueError(f"P(T, Y | Z={z}) must sum to 1")

    a_eq, b_eq = _response_constraints(p_obs)
    c = _ate_cost()
    lo = simplex_solve(LpProblem(c=c, a_eq=a_eq, b_eq=b_eq))
    hi = simplex_solve(LpProblem(c=-c, a_eq=a_eq, b_eq=b_eq))
    return float(lo.value), float(-hi.value)


def empirical_iv_table(batch, z="Z", t="T", y="Y"):
    """P(T, Y | Z) estimated from a binary sample (codes 1/2)."""
    zs = batch.column(z)[:, 0].astype(int) - 1
    ts = batch.column(t)[:, 0].astype(int) - 1
    ys = batch.column(y)[:, 0].astype(int) - 1
    tab = np.zeros((2, 2, 2))
    for zi, ti, yi in zip(zs, ts, ys):
        tab[zi, ti, yi] += 1.0
    for zi in range(2):
        s = tab[zi].sum()
        if s == 0:
            raise ValueError(f"no samples with Z={zi + 1}")
        tab[zi] /= s
    return tab


def discretize(batch, node, k, bounds):
    """Midpoint discretization: values snap to bin centers of [l, u] cut k ways."""
    lo, hi = bounds
    if hi <= lo:
        raise RangeError(f"need u > l, got [{lo}, {hi}]")
    if k < 1:
        raise ValueError("k >= 1 required")
    col = batch.column_slice(node)
    spec = next(c for c in batch.schema if c.node == node)
    if spec.kind != "continuous":
        raise ValueError(f"node {node} is not continuous")
    data = batch.data.copy()
    v = data[:, col]
    idx = np.clip(np.floor(k * (v - lo) / (hi - lo)), 0, k - 1)
    data[:, col] = lo + (idx + 0.5) * (hi - lo) / k
    out = batch.__class__(batch.schema, data)
    return out
