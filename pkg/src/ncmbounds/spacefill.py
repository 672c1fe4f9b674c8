"""Measure-adapted Hilbert curves on dyadic partitions of the unit cube.

A depth-n curve visits all 2^(nd) dyadic cells in Hilbert order and dwells in
each cell for exactly its assigned mass, so the push-forward of Unif[0,1]
reproduces the mass tree on every dyadic cube, at every depth, to machine
precision.

Cell ids at depth n are digit tuples (i_1..i_n), each digit in [0, 2^d) a
d-bit corner label (bit a selects the upper half along axis a).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SizeError(Exception):
    pass


# --------------------------------------------------------------------------
# compact Hilbert ordering via Gray-code reflection
# --------------------------------------------------------------------------

def _gray_encode(i):
    return i ^ (i >> 1)


def _gray_encode_travel(start, end, mask, i):
    travel_bit = start ^ end
    modulus = mask + 1
    g = _gray_encode(i) * (travel_bit * 2)
    return ((g | (g // modulus)) & mask) ^ start


def _child_start_end(parent_start, parent_end, mask, i):
    start_i = max(0, (i - 1) & ~1)
    end_i = min(mask, (i + 1) | 1)
    child_start = _gray_encode_travel(parent_start, parent_end, mask, start_i)
    child_end = _gray_encode_travel(parent_start, parent_end, mask, end_i)
    return child_start, child_end


def hilbert_ordering(d: int, n: int, cell_budget: int = 1 << 22) -> list[tuple]:
    """Hilbert order of the 2^(nd) depth-n cells as digit tuples.

    Prefix consistency holds across depths because the initial orientation is
    fixed: the first n digits of the depth-(n+1) ordering at rank i equal the
    depth-n digits at rank ceil(i / 2^d).  Consecutive cells share a
    (d-1)-face.
    """
    if d < 1 or n < 1:
        raise ValueError("need d >= 1 and n >= 1")
    if (1 << (n * d)) > cell_budget:
        raise SizeError(f"2^({n}*{d}) cells exceed the budget {cell_budget}")
    mask = (1 << d) - 1
    out = []

    def walk(depth, start, end, prefix):
        if depth == n:
            out.append(prefix)
            return
        for i in range(mask + 1):
            digit = _gray_encode_travel(start, end, mask, i)
            cs, ce = _child_start_end(start, end, mask, i)
            walk(depth + 1, cs, ce, prefix + (digit,))

    walk(0, 0, 1, ())
    return out


def cell_box(digits, d):
    """Closed box [lo, hi] of the dyadic cell addressed by digit tuple."""
    lo = np.zeros(d)
    size = 1.0
    for digit in digits:
        size /= 2.0
        for a in range(d):
            if (digit >> a) & 1:
                lo[a] += size
    return lo, lo + size


def shared_face_center(digits_a, digits_b, d):
    lo_a, hi_a = cell_box(digits_a, d)
    lo_b, hi_b = cell_box(digits_b, d)
    lo = np.maximum(lo_a, lo_b)
    hi = np.minimum(hi_a, hi_b)
    if np.any(hi < lo - 1e-12):
        raise ValueError("cells do not touch")
    return (lo + hi) / 2.0


def adjacency_dimension(digits_a, digits_b, d) -> int:
    """Dimension of the intersection box of two cells (d-1 for face-adjacent)."""
    lo_a, hi_a = cell_box(digits_a, d)
    lo_b, hi_b = cell_box(digits_b, d)
    lo = np.maximum(lo_a, lo_b)
    hi = np.minimum(hi_a, hi_b)
    if np.any(hi < lo - 1e-12):
        return -1
    return int(np.sum(hi - lo > 1e-12))


# --------------------------------------------------------------------------
# mass trees
# --------------------------------------------------------------------------

@dataclass
class DyadicMassTree:
    """Mass on every dyadic cell up to ``depth``; children sum to parents.

    ``levels[l]`` maps flattened depth-l cell index -> mass; level 0 is the
    root.  Flattening is big-endian in the digits: index = sum digit_j * 2^(d*(l-1-j)).
    """

    d: int
    depth: int
    levels: list = field(default_factory=list)

    def __post_init__(self):
        if not self.levels:
            raise ValueError("levels must be supplied; use from_leaf_masses")
        if len(self.levels) != self.depth + 1:
            raise ValueError("need depth+1 levels")
        if abs(self.levels[0][0] - 1.0) > 1e-9:
            raise ValueError("root mass must be 1")
        for lvl, arr in enumerate(self.levels):
            if np.any(np.asarray(arr) < -1e-12):
                raise ValueError("masses must be nonnegative")
            if len(arr) != 1 << (self.d * lvl):
                raise ValueError("level size mismatch")
        for lvl in range(self.depth):
            child = np.asarray(self.levels[lvl + 1]).reshape(-1, 1 << self.d).sum(axis=1)
            if np.max(np.abs(child - self.levels[lvl])) > 1e-9:
                raise ValueError("child masses must sum to parent mass")

    @staticmethod
    def from_leaf_masses(d, depth, leaf_masses) -> "DyadicMassTree":
        """Aggregate leaves upward so parent consistency holds exactly."""
        leaves = np.asarray(leaf_masses, dtype=float)
        if leaves.size != 1 << (d * depth):
            raise ValueError("wrong number of leaves")
        if np.any(leaves < 0):
            raise ValueError("masses must be nonnegative")
        total = leaves.sum()
        if total <= 0:
            raise ValueError("total mass must be positive")
        leaves = leaves / total
        levels = [leaves]
        cur = leaves
        for _ in range(depth):
            cur = cur.reshape(-1, 1 << d).sum(axis=1)
            levels.append(cur)
        levels.reverse()
        levels[0] = np.array([1.0])
        return DyadicMassTree(d=d, depth=depth, levels=levels)

    @staticmethod
    def from_density(d, depth, density, points_per_cell=4, seed=0) -> "DyadicMassTree":
        """Leaf masses by midpoint-jittered quadrature of an unnormalized density."""
        n_cells = 1 << (d * depth)
        size = 0.5 ** depth
        ids = [_index_to_digits(i, d, depth) for i in range(n_cells)]
        los = np.array([cell_box(dig, d)[0] for dig in ids])
        rng = np.random.default_rng(seed)
        masses = np.zeros(n_cells)
        for k in range(points_per_cell):
            if k == 0:
                pts = los + size / 2.0
            else:
                pts = los + rng.uniform(0, size, size=los.shape)
            masses += np.asarray(density(pts), dtype=float)
        masses = np.maximum(masses, 0.0)
        return DyadicMassTree.from_leaf_masses(d, depth, masses)

    def mass(self, digits) -> float:
        lvl = len(digits)
        return float(self.levels[lvl][_digits_to_index(digits, self.d)])

    def leaf_mass(self, digits) -> float:
        return self.mass(digits)


def _digits_to_index(digits, d):
    idx = 0
    for dig in digits:
        idx = (idx << d) | dig
    return idx


def _index_to_digits(idx, d, depth):
    digits = []
    for j in range(depth):
        shift = d * (depth - 1 - j)
        digits.append((idx >> shift) & ((1 << d) - 1))
    return tuple(digits)


# --------------------------------------------------------------------------
# adapted curves
# --------------------------------------------------------------------------

@dataclass
class AdaptedCurve:
    """Piecewise-linear curve with dwell times matching a mass tree.

    times[i-1]..times[i] is the interval spent in cells[i-1]; waypoints sit on
    cell closures.  Maximal runs of positive-mass cells ("strands") start and
    end at cell centers with shared-face waypoints inside; zero-mass runs are
    crossed at a single merged breakpoint time.
    """

    d: int
    depth: int
    times: np.ndarray       # (M+1,)
    waypoints: np.ndarray   # (M+1, d)
    cells: list             # M digit tuples in curve order

    @property
    def n_segments(self) -> int:
        return len(self.cells)

    def evaluate(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float).ravel()
        idx = np.searchsorted(self.times, t, side="right") - 1
        idx = np.clip(idx, 0, self.n_segments - 1)
        # skip zero-length segments (merged breakpoints): move to the
        # enclosing positive segment
        width = np.diff(self.times)
        for k in np.nonzero(width[idx] <= 0)[0]:
            j = idx[k]
            while j < self.n_segments - 1 and width[j] <= 0:
                j += 1
            idx[k] = j
        lo = self.times[idx]
        w = np.where(width[idx] > 0, width[idx], 1.0)
        frac = np.clip((t - lo) / w, 0.0, 1.0)
        a = self.waypoints[idx]
        b = self.waypoints[idx + 1]
        return a + frac[:, None] * (b - a)

    def write_csv(self, path):
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time"] + [f"x{i}" for i in range(self.d)])
            for t, v in zip(self.times, self.waypoints):
                w.writerow([f"{t:.17g}"] + [f"{c:.17g}" for c in v])


def adapted_curve(tree: DyadicMassTree, ordering=None) -> AdaptedCurve:
    """Speed-adapted Hilbert traversal of the tree's leaf cells."""
    if ordering is None:
        ordering = hilbert_ordering(tree.d, tree.depth)
    if len(ordering) != 1 << (tree.d * tree.depth):
        raise ValueError("ordering depth does not match tree depth")
    d = tree.d
    masses = np.array([tree.leaf_mass(c) for c in ordering])
    times = np.concatenate([[0.0], np.cumsum(masses)])
    times[-1] = 1.0  # guard the last cumulative rounding
    m = len(ordering)
    centers = np.array([(cell_box(c, d)[0] + cell_box(c, d)[1]) / 2.0 for c in ordering])
    pos = masses > 0.0
    waypoints = np.zeros((m + 1, d))
    waypoints[0] = centers[0]
    for i in range(1, m):
        left, right = pos[i - 1], pos[i]
        if left and right:
            waypoints[i] = shared_face_center(ordering[i - 1], ordering[i], d)
        elif left:
            waypoints[i] = centers[i - 1]   # strand ends inside its last cell
        elif right:
            waypoints[i] = centers[i]       # next strand starts at its center
        else:
            waypoints[i] = centers[i]
    waypoints[m] = centers[m - 1]
    return AdaptedCurve(d=d, depth=tree.depth, times=times, waypoints=waypoints,
                        cells=list(ordering))


def curve_pushforward_check(curve: AdaptedCurve, tree: DyadicMassTree) -> float:
    """Max over all depths/cubes of |dwell time - assigned mass|.

    Dwell is computed analytically from the breakpoint times: the curve
    spends times[i+1]-times[i] in leaf cells[i], and an ancestor's dwell is
    the sum over its leaves.
    """
    leaf_dwell = np.diff(curve.times)
    worst = 0.0
    for lvl in range(tree.depth + 1):
        acc = {}
        for dwell, cell in zip(leaf_dwell, curve.cells):
            key = cell[:lvl]
            acc[key] = acc.get(key, 0.0) + dwell
        for key, dwell in acc.items():
            worst = max(worst, abs(dwell - tree.mass(key)))
    return worst


def empirical_curve_distribution(curve: AdaptedCurve, n_samples: int, seed):
    """SampleBatch of gamma(U), U ~ Unif[0,1]."""
    from .scm import ColumnSpec, SampleBatch

    if n_samples < 1:
        raise ValueError("n_samples >= 1")
    rng = np.random.default_rng(seed)
    pts = curve.evaluate(rng.uniform(0.0, 1.0, size=n_samples))
    schema = [ColumnSpec("gamma", "continuous", curve.d)]
    return SampleBatch(schema, pts)


def holder_ratio(curve: AdaptedCurve) -> float:
    """max ||gamma(s)-gamma(t)||_1 / |s-t|^(1/d) over breakpoint pairs.

    Finite-depth diagnostic for the 1/d-Holder property; 1-norm ground metric.
    """
    t = curve.times
    v = curve.waypoints
    d = curve.d
    best = 0.0
    for i in range(len(t) - 1):
        dt = np.abs(t[i + 1:] - t[i])
        keep = dt > 0
        if not np.any(keep):
            continue
        num = np.abs(v[i + 1:] - v[i]).sum(axis=1)[keep]
        best = max(best, float(np.max(num / dt[keep] ** (1.0 / d))))
    return best


def tree_sampler(tree: DyadicMassTree):
    """Sampler from the tree's piecewise-uniform leaf density (test oracle)."""
    d, depth = tree.d, tree.depth
    n_cells = 1 << (d * depth)
    ids = [_index_to_digits(i, d, depth) for i in range(n_cells)]
    los = np.array([cell_box(c, d)[0] for c in ids])
    masses = np.asarray(tree.levels[depth], dtype=float)
    cum = np.concatenate([[0.0], np.cumsum(masses)])
    cum[-1] = 1.0
    size = 0.5 ** depth

    def draw(rng, n):
        u = rng.uniform(0, 1, size=n)
        cell = np.clip(np.searchsorted(cum, u, side="right") - 1, 0, n_cells - 1)
        return los[cell] + rng.uniform(0, size, size=(n, d))

    return draw
