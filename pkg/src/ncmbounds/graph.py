"""Causal-graph machinery: ADMGs, C2-components, canonical SCM form.

A causal graph here is an acyclic directed mixed graph: directed edges carry
functional dependence, bidirected edges mark shared latent confounding.  The
C2-components (maximal cliques of the bidirected subgraph) drive how latent
variables are merged into the canonical one-latent-per-component form.
"""

from __future__ import annotations

from dataclasses import dataclass, field


class CycleError(Exception):
    """Directed part of the graph contains a cycle."""

    def __init__(self, cycle):
        self.cycle = list(cycle)
        super().__init__("directed cycle: " + " -> ".join(self.cycle))


class AssignmentError(Exception):
    """A latent's influenced set fits in no single C2-component."""


@dataclass(frozen=True)
class NodeSpec:
    """One observed variable: continuous in R^dim or categorical on {1..cardinality}.

    ``bound`` is the box bound K: continuous values live in [-K, K]^dim.
    """

    name: str
    kind: str  # "continuous" | "categorical"
    dim: int = 1
    cardinality: int = 0
    bound: float = 1.0

    def __post_init__(self):
        if self.kind not in ("continuous", "categorical"):
            raise ValueError(f"unknown node kind {self.kind!r}")
        if self.kind == "continuous" and self.dim < 1:
            raise ValueError("continuous node needs dim >= 1")
        if self.kind == "categorical" and self.cardinality < 2:
            raise ValueError("categorical node needs cardinality >= 2")
        if self.bound <= 0:
            raise ValueError("bound K must be positive")

    @property
    def width(self) -> int:
        """Number of columns this node occupies in a sample matrix."""
        return self.dim if self.kind == "continuous" else 1


def continuous(name, dim=1, bound=1.0) -> NodeSpec:
    return NodeSpec(name, "continuous", dim=dim, bound=bound)


def categorical(name, cardinality, bound=None) -> NodeSpec:
    # codes live in [1, cardinality]; the box bound defaults to the top code
    return NodeSpec(name, "categorical", cardinality=cardinality,
                    bound=float(cardinality if bound is None else bound))


@dataclass(frozen=True)
class C2Component:
    """Maximal set of nodes pairwise joined by bidirected edges."""

    members: frozenset

    def sort_key(self):
        return tuple(sorted(self.members))

    def __contains__(self, name):
        return name in self.members

    def __iter__(self):
        return iter(sorted(self.members))

    def __len__(self):
        return len(self.members)


@dataclass
class CausalGraph:
    """ADMG over declared nodes.  Immutable after construction."""

    nodes: list[NodeSpec]
    directed_edges: set[tuple[str, str]] = field(default_factory=set)
    bidirected_edges: set[frozenset] = field(default_factory=set)

    def __post_init__(self):
        names = [n.name for n in self.nodes]
        if len(set(names)) != len(names):
            raise ValueError("duplicate node names")
        known = set(names)
        self.directed_edges = {(str(a), str(b)) for a, b in self.directed_edges}
        for a, b in self.directed_edges:
            if a == b:
                raise ValueError(f"self-loop on {a}")
            if a not in known or b not in known:
                raise ValueError(f"edge ({a},{b}) references unknown node")
        norm = set()
        for e in self.bidirected_edges:
            a, b = tuple(e)
            if a == b:
                raise ValueError(f"bidirected self-loop on {a}")
            if a not in known or b not in known:
                raise ValueError(f"bidirected edge {set(e)} references unknown node")
            norm.add(frozenset((a, b)))
        self.bidirected_edges = norm
        self._order = topological_order(self)  # raises CycleError eagerly

    def node(self, name) -> NodeSpec:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def node_names(self) -> list[str]:
        return [n.name for n in self.nodes]

    def parents(self, name) -> list[str]:
        """Parents of ``name`` in node-declaration order."""
        ps = {a for a, b in self.directed_edges if b == name}
        return [n.name for n in self.nodes if n.name in ps]

    def has_bidirected(self, a, b) -> bool:
        return frozenset((a, b)) in self.bidirected_edges

    def descendants(self, name) -> set[str]:
        out, stack = set(), [name]
        while stack:
            cur = stack.pop()
            for a, b in self.directed_edges:
                if a == cur and b not in out:
                    out.add(b)
                    stack.append(b)
        return out


def topological_order(g: CausalGraph) -> list[str]:
    """Kahn's algorithm with declaration-order tie-break (deterministic).

    Raises CycleError carrying one offending cycle if the directed part is
    cyclic.
    """
    names = g.node_names()
    remaining = {n: 0 for n in names}
    for _, b in g.directed_edges:
        remaining[b] += 1
    order = []
    while True:
        ready = [n for n in names if n in remaining and remaining[n] == 0]
        if not ready:
            break
        cur = ready[0]  # declaration-order tie-break
        order.append(cur)
        del remaining[cur]
        for a, b in g.directed_edges:
            if a == cur and b in remaining:
                remaining[b] -= 1
    if remaining:
        raise CycleError(_find_cycle(g, set(remaining)))
    return order


def _find_cycle(g, candidates):
    # walk parents inside the stuck set until a repeat shows up
    start = sorted(candidates)[0]
    seen, path, cur = {}, [], start
    while cur not in seen:
        seen[cur] = len(path)
        path.append(cur)
        preds = sorted(a for a, b in g.directed_edges if b == cur and a in candidates)
        cur = preds[0]
    return path[seen[cur]:] + [cur]


def c2_components(g: CausalGraph) -> list[C2Component]:
    """All maximal cliques of the bidirected subgraph, sorted canonically.

    Nodes with no bidirected edge form singleton components, so every node
    appears in at least one component.  Bron-Kerbosch with pivoting; graphs
    here are small, exponential worst case is fine.
    """
    names = g.node_names()
    adj = {n: set() for n in names}
    for e in g.bidirected_edges:
        a, b = tuple(e)
        adj[a].add(b)
        adj[b].add(a)

    cliques = []

    def expand(r, p, x):
        if not p and not x:
            cliques.append(frozenset(r))
            return
        pivot = max(p | x, key=lambda u: len(adj[u] & p))
        for v in sorted(p - adj[pivot]):
            expand(r | {v}, p & adj[v], x & adj[v])
            p = p - {v}
            x = x | {v}

    expand(set(), set(names), set())
    comps = [C2Component(c) for c in cliques]
    return sorted(comps, key=C2Component.sort_key)


def component_of_latent(components, influenced: set) -> int:
    """Index of the first canonical component containing every influenced node.

    Raises AssignmentError when no single component covers the set (the paper
    never defines behavior for that case; erroring beats guessing).
    """
    for i, comp in enumerate(components):
        if influenced <= comp.members:
            return i
    raise AssignmentError(
        f"latent influence set {sorted(influenced)} fits in no single C2-component")


def canonicalize(model):
    """One merged latent per C2-component; interventional laws unchanged.

    Accepts and returns an ``scm.ScmModel``.  Implemented here because the
    merge is pure graph bookkeeping; the scm module supplies the model type.
    """
    from . import scm as _scm

    g = model.graph
    comps = c2_components(g)
    latent_names = list(model.latent_samplers)

    # which component each original latent lands in
    assignment = {}
    for lname in latent_names:
        infl = model.latent_influence(lname)
        if not infl:
            raise AssignmentError(f"latent {lname} influences no node")
        assignment[lname] = component_of_latent(comps, infl)

    merged_names = [f"U_C{i}" for i in range(len(comps))]
    merged_members: list[list[str]] = [[] for _ in comps]
    for lname in latent_names:  # declaration order preserved inside each merge
        merged_members[assignment[lname]].append(lname)

    # merged sampler draws constituents in original declaration order
    new_samplers = {}
    offsets: dict[str, tuple[str, int, int]] = {}
    for ci, members in enumerate(merged_members):
        specs = [model.latent_samplers[m] for m in members]
        dim = sum(s.dim for s in specs) if specs else 1
        off = 0
        for m, s in zip(members, specs):
            offsets[m] = (merged_names[ci], off, off + s.dim)
            off += s.dim
        new_samplers[merged_names[ci]] = _scm.LatentSpec(
            dim=dim, sampler=_merged_sampler(specs), bound=max((s.bound for s in specs), default=1.0))

    new_fns = {}
    for node in g.node_names():
        fn = model.functions[node]
        parents = [i for i in fn.inputs if i not in model.latent_samplers]
        used_latents = [i for i in fn.inputs if i in model.latent_samplers]
        # canonical form wires every component containing the node
        comp_ids = [i for i, c in enumerate(comps) if node in c]
        new_inputs = parents + [merged_names[i] for i in comp_ids]
        new_fns[node] = _scm.StructuralFn(
            node=node,
            inputs=new_inputs,
            fn=_rewired(fn.fn, parents, used_latents, offsets),
        )

    return _scm.ScmModel(graph=g, functions=new_fns, latent_samplers=new_samplers)


def _merged_sampler(specs):
    import numpy as np

    def draw(rng, n):
        if not specs:
            return rng.uniform(0.0, 1.0, size=(n, 1))
        return np.concatenate([s.sampler(rng, n) for s in specs], axis=1)

    return draw


def _rewired(fn, parents, used_latents, offsets):
    def call(values):
        ins = {p: values[p] for p in parents}
        for lname in used_latents:
            merged, lo, hi = offsets[lname]
            ins[lname] = values[merged][:, lo:hi]
        return fn(ins)

    return call


def structurally_equal(a, b) -> bool:
    """Same graph, same wiring, same latent shapes (functions compared by wiring only)."""
    if a.graph.node_names() != b.graph.node_names():
        return False
    if a.graph.directed_edges != b.graph.directed_edges:
        return False
    if a.graph.bidirected_edges != b.graph.bidirected_edges:
        return False
    if list(a.latent_samplers) != list(b.latent_samplers):
        return False
    for k in a.latent_samplers:
        if a.latent_samplers[k].dim != b.latent_samplers[k].dim:
            return False
    for node in a.graph.node_names():
        if a.functions[node].inputs != b.functions[node].inputs:
            return False
    return True
