"""Ground-truth SCM simulation and the benchmark model zoo.

Sampling is pure given (model, seed).  Categorical nodes follow the
Gumbel-argmax convention: node j is drawn as argmax_k {g_k + log p_k} with
fresh i.i.d. standard Gumbel draws, where p is the propensity vector emitted
by the node's structural function.  Codes are 1-based integers in [1, n_i].
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import graph as graphmod
from .graph import CausalGraph, NodeSpec, categorical, continuous


class NumericalError(Exception):
    """Propensities or values went somewhere log/eval cannot follow."""


class ParamError(Exception):
    """Model-zoo parameter outside its admissible range."""


@dataclass
class StructuralFn:
    """Deterministic map from named parent/latent arrays to a node's output.

    ``fn`` receives a dict name -> (n, d) array and returns (n, d_out) for
    continuous nodes or an (n, cardinality) propensity matrix for categorical
    nodes (rows on the simplex).
    """

    node: str
    inputs: list[str]
    fn: Callable[[dict], np.ndarray]


@dataclass
class LatentSpec:
    dim: int
    sampler: Callable[[np.random.Generator, int], np.ndarray]
    bound: float = 1.0


@dataclass
class ColumnSpec:
    node: str
    kind: str
    width: int
    cardinality: int = 0

    def to_json(self):
        return {"node": self.node, "kind": self.kind, "width": self.width,
                "cardinality": self.cardinality}


@dataclass
class SampleBatch:
    """n x d matrix of mixed columns plus the column schema."""

    schema: list[ColumnSpec]
    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise ValueError("sample matrix must be (n, d) with n >= 1")
        if self.data.shape[1] != sum(c.width for c in self.schema):
            raise ValueError("schema width does not match data")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    def column_slice(self, node) -> slice:
        off = 0
        for c in self.schema:
            if c.node == node:
                return slice(off, off + c.width)
            off += c.width
        raise KeyError(node)

    def column(self, node) -> np.ndarray:
        return self.data[:, self.column_slice(node)]

    def subsample(self, idx) -> "SampleBatch":
        return SampleBatch(self.schema, self.data[np.asarray(idx)])

    def write_csv(self, path, schema_path=None, extra_meta=None):
        header = []
        for c in self.schema:
            if c.width == 1:
                header.append(c.node)
            else:
                header.extend(f"{c.node}_{i}" for i in range(c.width))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in self.data:
                w.writerow([f"{v:.17g}" for v in row])
        if schema_path is not None:
            meta = {"columns": [c.to_json() for c in self.schema]}
            if extra_meta:
                meta.update(extra_meta)
            with open(schema_path, "w") as fh:
                json.dump(meta, fh, indent=2, sort_keys=True)
                fh.write("\n")

    @staticmethod
    def read_csv(path, schema_path):
        with open(schema_path) as fh:
            meta = json.load(fh)
        schema = [ColumnSpec(c["node"], c["kind"], c["width"], c.get("cardinality", 0))
                  for c in meta["columns"]]
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return SampleBatch(schema, data)


@dataclass
class ScmModel:
    """Graph + structural functions + latent samplers; supports do-interventions."""

    graph: CausalGraph
    functions: dict[str, StructuralFn]
    latent_samplers: dict[str, LatentSpec]
    meta: dict = field(default_factory=dict)

    def latent_influence(self, latent_name) -> set:
        return {node for node, fn in self.functions.items() if latent_name in fn.inputs}

    def schema(self) -> list[ColumnSpec]:
        return [ColumnSpec(n.name, n.kind, n.width, n.cardinality) for n in self.graph.nodes]


def gumbel_argmax_codes(rng, propensities) -> np.ndarray:
    """Exact categorical sampling: argmax_k {g_k + log p_k} + 1 (1-based codes)."""
    p = np.asarray(propensities, dtype=float)
    if not np.all(np.isfinite(p)):
        raise NumericalError("non-finite propensities")
    if np.any(p <= 0.0):
        raise NumericalError("zero propensity where log is required (mis-specified model)")
    rowsum = p.sum(axis=1)
    if np.any(np.abs(rowsum - 1.0) > 1e-9):
        raise NumericalError("propensity rows must sum to 1 within 1e-9")
    g = rng.gumbel(size=p.shape)
    return (np.argmax(g + np.log(p), axis=1) + 1).astype(float)


def _evaluate(model: ScmModel, n, rng, do=None) -> SampleBatch:
    do = dict(do or {})
    for name, val in do.items():
        spec = model.graph.node(name)
        if spec.kind == "categorical":
            if not (1 <= int(val) <= spec.cardinality):
                raise ValueError(f"do value {val} outside cardinality of {name}")
        else:
            if np.any(np.abs(val) > spec.bound + 1e-12):
                raise ValueError(f"do value {val} outside [-K, K] of {name}")

    latents = {}
    for lname, spec in model.latent_samplers.items():
        draw = np.asarray(spec.sampler(rng, n), dtype=float)
        if draw.shape != (n, spec.dim):
            raise NumericalError(f"latent {lname} sampler returned shape {draw.shape}")
        latents[lname] = draw

    values: dict[str, np.ndarray] = {}
    for node in graphmod.topological_order(model.graph):
        spec = model.graph.node(node)
        if node in do:
            col = np.full((n, spec.width), float(do[node]))
            values[node] = col
            continue
        fn = model.functions[node]
        ins = {}
        for name in fn.inputs:
            ins[name] = values[name] if name in values else latents[name]
        out = np.asarray(fn.fn(ins), dtype=float)
        if spec.kind == "categorical":
            codes = gumbel_argmax_codes(rng, out)
            values[node] = codes.reshape(n, 1)
        else:
            if out.shape != (n, spec.dim):
                raise NumericalError(f"node {node} returned shape {out.shape}")
            if not np.all(np.isfinite(out)):
                raise NumericalError(f"node {node} produced non-finite values")
            values[node] = np.clip(out, -spec.bound, spec.bound)

    data = np.concatenate([values[n.name] for n in model.graph.nodes], axis=1)
    return SampleBatch(model.schema(), data)


def sample_observational(model: ScmModel, n: int, seed) -> SampleBatch:
    if n < 1:
        raise ValueError("n >= 1 required")
    return _evaluate(model, n, np.random.default_rng(seed))


def sample_interventional(model: ScmModel, do: dict, n: int, seed) -> SampleBatch:
    if n < 1:
        raise ValueError("n >= 1 required")
    return _evaluate(model, n, np.random.default_rng(seed), do=do)


class AteEstimate(NamedTuple):
    value: float
    stderr: float


def true_ate(model: ScmModel, outcome: str, treat_node: str, t1, t0,
             n_mc: int = 100_000, seed=0) -> AteEstimate:
    """Monte-Carlo E[Y(t1) - Y(t0)] with common random numbers per arm pair."""
    y1 = sample_interventional(model, {treat_node: t1}, n_mc, seed).column(outcome)
    y0 = sample_interventional(model, {treat_node: t0}, n_mc, seed).column(outcome)
    diff = (y1 - y0).ravel()
    return AteEstimate(float(diff.mean()), float(diff.std(ddof=1) / np.sqrt(n_mc)))


# --------------------------------------------------------------------------
# model zoo
# --------------------------------------------------------------------------

def _truncated_gaussian(rng, n, lo=-1.0, hi=1.0, scale=1.0):
    """Rejection sampling of N(0, scale^2) conditioned on [lo, hi]."""
    out = np.empty(n)
    filled = 0
    while filled < n:
        cand = rng.normal(0.0, scale, size=max(n - filled, 16) * 2)
        keep = cand[(cand >= lo) & (cand <= hi)]
        take = min(len(keep), n - filled)
        out[filled:filled + take] = keep[:take]
        filled += take
    return out


def _mixture_noise(lam):
    """E^lam = lam * Z1 + (1 - lam) * Unif(-1,1), Z1 standard Gaussian on [-1,1]."""

    def draw(rng, n):
        z1 = _truncated_gaussian(rng, n)
        u = rng.uniform(-1.0, 1.0, size=n)
        return (lam * z1 + (1.0 - lam) * u).reshape(n, 1)

    return draw


def continuous_iv(lam: float) -> ScmModel:
    """Binary-treatment IV model with mixture latent noise; true ATE is 3."""
    if not (0.0 <= lam <= 1.0):
        raise ParamError(f"lam must lie in [0, 1], got {lam}")
    g = CausalGraph(
        nodes=[continuous("Z", bound=1.0), categorical("T", 2), continuous("Y", bound=5.0)],
        directed_edges={("Z", "T"), ("T", "Y")},
        bidirected_edges={frozenset(("T", "Y"))},
    )

    def f_z(ins):
        return ins["E_Z"]

    def f_t(ins):
        p1 = (1.5 + ins["Z"][:, 0] + 0.5 * ins["U_TY"][:, 0]) / 3.0
        p1 = np.clip(p1, 1e-12, 1.0 - 1e-12)
        return np.stack([1.0 - p1, p1], axis=1)

    def f_y(ins):
        t = ins["T"][:, 0] - 1.0  # codes {1,2} -> values {0,1}
        u = ins["U_TY"][:, 0]
        return (3.0 * t - 1.5 * t * u + u + ins["E_Y"][:, 0]).reshape(-1, 1)

    fns = {
        "Z": StructuralFn("Z", ["E_Z"], f_z),
        "T": StructuralFn("T", ["Z", "U_TY"], f_t),
        "Y": StructuralFn("Y", ["T", "U_TY", "E_Y"], f_y),
    }
    lat = {
        "E_Z": LatentSpec(1, _mixture_noise(lam)),
        "U_TY": LatentSpec(1, _mixture_noise(lam)),
        "E_Y": LatentSpec(1, _mixture_noise(lam)),
    }
    meta = {"name": "continuous_iv", "lam": lam, "outcome": "Y", "treat": "T",
            "t1": 2, "t0": 1, "true_ate": 3.0}
    return ScmModel(g, fns, lat, meta)


def binary_iv(p_z, p_t_given_zu, p_y_given_tu, p_u) -> ScmModel:
    """Binary instrument/treatment/outcome with a discrete confounder U.

    p_z: P(Z=1).  p_t_given_zu[z][u] = P(T=1 | Z=z, U=u) for z in {0,1}.
    p_y_given_tu[t][u] = P(Y=1 | T=t, U=u).  p_u: distribution over U states.
    """
    p_u = np.asarray(p_u, dtype=float)
    pt = np.asarray(p_t_given_zu, dtype=float)
    py = np.asarray(p_y_given_tu, dtype=float)
    n_u = len(p_u)
    if not (0.0 <= p_z <= 1.0) or abs(p_u.sum() - 1.0) > 1e-9 or np.any(p_u < 0):
        raise ParamError("invalid probability inputs")
    if pt.shape != (2, n_u) or py.shape != (2, n_u):
        raise ParamError("tables must have shape (2, n_states_of_U)")
    if np.any(pt < 0) or np.any(pt > 1) or np.any(py < 0) or np.any(py > 1):
        raise ParamError("conditional probabilities must lie in [0, 1]")

    g = CausalGraph(
        nodes=[categorical("Z", 2), categorical("T", 2), categorical("Y", 2)],
        directed_edges={("Z", "T"), ("T", "Y")},
        bidirected_edges={frozenset(("T", "Y"))},
    )

    cum_u = np.concatenate([[0.0], np.cumsum(p_u)])

    def draw_u(rng, n):
        # discrete confounder encoded as its state index, bounded by n_u
        u = rng.uniform(0.0, 1.0, size=n)
        state = np.searchsorted(cum_u, u, side="right") - 1
        return np.clip(state, 0, n_u - 1).astype(float).reshape(n, 1)

    eps = 1e-12

    def f_z(ins):
        n = ins["E_Z"].shape[0]
        p1 = np.clip(np.full(n, p_z), eps, 1 - eps)
        return np.stack([1.0 - p1, p1], axis=1)

    def f_t(ins):
        z = (ins["Z"][:, 0] - 1.0).astype(int)
        u = ins["U_TY"][:, 0].astype(int)
        p1 = np.clip(pt[z, u], eps, 1 - eps)
        return np.stack([1.0 - p1, p1], axis=1)

    def f_y(ins):
        t = (ins["T"][:, 0] - 1.0).astype(int)
        u = ins["U_TY"][:, 0].astype(int)
        p1 = np.clip(py[t, u], eps, 1 - eps)
        return np.stack([1.0 - p1, p1], axis=1)

    fns = {
        "Z": StructuralFn("Z", ["E_Z"], f_z),
        "T": StructuralFn("T", ["Z", "U_TY"], f_t),
        "Y": StructuralFn("Y", ["T", "U_TY"], f_y),
    }
    lat = {
        "E_Z": LatentSpec(1, lambda rng, n: rng.uniform(0, 1, size=(n, 1))),
        "U_TY": LatentSpec(1, draw_u, bound=float(max(n_u, 1))),
    }
    true_ate_val = float(np.sum(p_u * (py[1] - py[0])))
    meta = {"name": "binary_iv", "outcome": "Y", "treat": "T", "t1": 2, "t0": 1,
            "true_ate": true_ate_val}
    return ScmModel(g, fns, lat, meta)


def _truncnorm_uy(rng, n):
    # mean-zero noise for the counterexample family: N(0, 0.25) truncated to [-1, 1]
    return _truncated_gaussian(rng, n, scale=0.5).reshape(n, 1)


def _counterexample_graph(x_bound=1.0):
    return CausalGraph(
        nodes=[continuous("X", bound=x_bound), categorical("T", 2), continuous("Y", bound=3.0)],
        directed_edges={("X", "T"), ("X", "Y"), ("T", "Y")},
        bidirected_edges=set(),
    )


def counterexample_star() -> ScmModel:
    """Backdoor model with discontinuous outcome mechanism; ATE = 19/30."""
    g = _counterexample_graph()

    def f_x(ins):
        return np.where(ins["E_X"] < 0.5, -1.0, 0.0)

    def f_t(ins):
        x = ins["X"][:, 0]
        p1 = np.where(x < -0.5, 0.5, 5.0 / 8.0)
        return np.stack([1.0 - p1, p1], axis=1)

    def f_y(ins):
        x = ins["X"][:, 0]
        t = ins["T"][:, 0] - 1.0
        u1 = (ins["E_Y"][:, 0] < 3.0 / 5.0).astype(float)
        u2 = (ins["E_Y"][:, 1] < 1.0 / 3.0).astype(float)
        uy = ins["E_Y"][:, 2]
        y = np.where(x < -0.5, t + uy, np.where(t > 0.5, u1 + uy, u2 + uy))
        return y.reshape(-1, 1)

    def draw_ey(rng, n):
        a = rng.uniform(0, 1, size=(n, 2))
        return np.concatenate([a, _truncnorm_uy(rng, n)], axis=1)

    fns = {
        "X": StructuralFn("X", ["E_X"], f_x),
        "T": StructuralFn("T", ["X"], f_t),
        "Y": StructuralFn("Y", ["X", "T", "E_Y"], f_y),
    }
    lat = {
        "E_X": LatentSpec(1, lambda rng, n: rng.uniform(0, 1, size=(n, 1))),
        "E_Y": LatentSpec(3, draw_ey),
    }
    meta = {"name": "counterexample_star", "outcome": "Y", "treat": "T",
            "t1": 2, "t0": 1, "true_ate": 19.0 / 30.0}
    return ScmModel(g, fns, lat, meta)


def counterexample_delta(delta: float) -> ScmModel:
    """Perturbed counterexample: W1 to the star model <= delta/2, ATE = 1/2."""
    if delta <= 0:
        raise ParamError(f"delta must be positive, got {delta}")
    g = _counterexample_graph(x_bound=max(1.0, delta))

    def f_x(ins):
        e = ins["E_X"][:, 0]
        return np.where(e < 0.5, -1.0, np.where(e < 0.75, 0.0, delta)).reshape(-1, 1)

    def f_t(ins):
        x = ins["X"][:, 0]
        p1 = np.where(x > delta / 2.0, 0.75, 0.5)
        return np.stack([1.0 - p1, p1], axis=1)

    def f_y(ins):
        x = ins["X"][:, 0]
        t = ins["T"][:, 0] - 1.0
        uy = ins["E_Y"][:, 0]
        y = np.where(x < 0.0, t + uy, x / delta + uy)
        return y.reshape(-1, 1)

    fns = {
        "X": StructuralFn("X", ["E_X"], f_x),
        "T": StructuralFn("T", ["X"], f_t),
        "Y": StructuralFn("Y", ["X", "T", "E_Y"], f_y),
    }
    lat = {
        "E_X": LatentSpec(1, lambda rng, n: rng.uniform(0, 1, size=(n, 1))),
        "E_Y": LatentSpec(1, _truncnorm_uy),
    }
    meta = {"name": "counterexample_delta", "delta": delta, "outcome": "Y",
            "treat": "T", "t1": 2, "t0": 1, "true_ate": 0.5}
    return ScmModel(g, fns, lat, meta)


def backdoor_no_confounding(slope: float = 2.0, noise: float = 1.0) -> ScmModel:
    """Identifiable chain T -> Y with no bidirected edges; ATE = slope."""
    g = CausalGraph(
        nodes=[categorical("T", 2), continuous("Y", bound=abs(slope) + noise + 0.5)],
        directed_edges={("T", "Y")},
        bidirected_edges=set(),
    )

    def f_t(ins):
        n = ins["E_T"].shape[0]
        return np.full((n, 2), 0.5)

    def f_y(ins):
        t = ins["T"][:, 0] - 1.0
        return (slope * t + noise * ins["E_Y"][:, 0]).reshape(-1, 1)

    fns = {
        "T": StructuralFn("T", ["E_T"], f_t),
        "Y": StructuralFn("Y", ["T", "E_Y"], f_y),
    }
    lat = {
        "E_T": LatentSpec(1, lambda rng, n: rng.uniform(0, 1, size=(n, 1))),
        "E_Y": LatentSpec(1, lambda rng, n: rng.uniform(-1, 1, size=(n, 1))),
    }
    meta = {"name": "backdoor_no_confounding", "outcome": "Y", "treat": "T",
            "t1": 2, "t0": 1, "true_ate": float(slope)}
    return ScmModel(g, fns, lat, meta)


_DEFAULT_BINARY_TABLE = dict(
    p_z=0.5,
    p_t_given_zu=[[0.15, 0.5], [0.5, 0.9]],
    p_y_given_tu=[[0.2, 0.6], [0.5, 0.9]],
    p_u=[0.5, 0.5],
)


def model_zoo(name: str, params: dict | None = None) -> ScmModel:
    """Named benchmark models; see the individual constructors for equations."""
    params = dict(params or {})
    try:
        if name == "continuous_iv":
            return continuous_iv(float(params.pop("lam")))
        if name == "binary_iv":
            table = {**_DEFAULT_BINARY_TABLE, **params}
            return binary_iv(table["p_z"], table["p_t_given_zu"],
                             table["p_y_given_tu"], table["p_u"])
        if name == "counterexample_star":
            return counterexample_star()
        if name == "counterexample_delta":
            return counterexample_delta(float(params.pop("delta")))
        if name == "backdoor_no_confounding":
            return backdoor_no_confounding(**params)
    except KeyError as exc:
        raise ParamError(f"missing parameter {exc} for model {name!r}") from exc
    raise ParamError(f"unknown model {name!r}")
