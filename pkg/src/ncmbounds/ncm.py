"""Neural causal models wired from a causal graph.

One latent generator per C2-component: per mixture slot, a curve block
(scalar uniform -> cube) composed with a homeomorphism block (cube -> latent
space), combined by a Gumbel-softmax layer over slots.  Per-node MLPs read
parents plus the latents of every component containing the node; categorical
nodes emit propensities and sample by Gumbel-argmax (hard codes, straight-
through soft codes when differentiating).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import diff, graph as graphmod
from .diff import MlpParams, Tensor
from .scm import ColumnSpec, SampleBatch


class ConfigError(Exception):
    pass


class NumericalError(Exception):
    pass


@dataclass
class ArchConfig:
    """Architecture knobs; defaults follow the experiment setup.

    Depths count weight layers.  The generator splits its depth between the
    curve block (w1, l1) and the homeomorphism block (w2, l2); 3 + 3 layers of
    width 128 reproduce the six-layer generators, f-nets are 3 x 128.
    """

    f_width: int = 128
    f_depth: int = 3
    g_width1: int = 128
    g_depth1: int = 3
    g_width2: int = 128
    g_depth2: int = 3
    mixture_slots: int = 1
    tau: float = 0.0
    tau_st: float = 0.5
    lipschitz_cap: float | None = 8.0
    project_generators: bool = False
    latent_dim: int = 2
    latent_bound: float | None = None
    trainable_logits: bool = True

    def validate(self):
        for name in ("f_width", "f_depth", "g_width1", "g_depth1", "g_width2",
                     "g_depth2", "mixture_slots", "latent_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.tau < 0:
            raise ConfigError("tau must be >= 0")
        if self.lipschitz_cap is not None and self.lipschitz_cap <= 0:
            raise ConfigError("lipschitz_cap must be positive")
        return self


@dataclass
class LatentGenerator:
    """Mixture-of-push-forwards generator for one C2-component."""

    component: tuple
    slots: list            # list of (curve MlpParams, homeo MlpParams)
    logits: Tensor         # (1, n_slots) mixture log-weights
    out_dim: int
    bound: float
    trainable_logits: bool = True

    def parameters(self):
        ps = []
        for g1, g2 in self.slots:
            ps.extend(g1.parameters())
            ps.extend(g2.parameters())
        if self.trainable_logits:
            ps.append(self.logits)
        return ps


@dataclass
class NcmParams:
    graph: graphmod.CausalGraph
    cfg: ArchConfig
    node_mlps: dict            # node name -> MlpParams
    generators: list           # one LatentGenerator per C2-component
    components: list           # matching C2Component list

    def parameters(self):
        ps = []
        for g in self.generators:
            ps.extend(g.parameters())
        for mlp in self.node_mlps.values():
            ps.extend(mlp.parameters())
        return ps

    def clone(self) -> "NcmParams":
        def copy_mlp(m):
            return MlpParams(
                layers=[(Tensor.param(w.value.copy()), Tensor.param(b.value.copy()))
                        for w, b in m.layers],
                output=m.output)

        gens = [LatentGenerator(component=g.component,
                                slots=[(copy_mlp(a), copy_mlp(b)) for a, b in g.slots],
                                logits=Tensor.param(g.logits.value.copy()),
                                out_dim=g.out_dim, bound=g.bound,
                                trainable_logits=g.trainable_logits)
                for g in self.generators]
        return NcmParams(self.graph, self.cfg,
                         {k: copy_mlp(v) for k, v in self.node_mlps.items()},
                         gens, list(self.components))

    def schema(self):
        return [ColumnSpec(n.name, n.kind, n.width, n.cardinality)
                for n in self.graph.nodes]


def build_ncm(g: graphmod.CausalGraph, cfg: ArchConfig, seed) -> NcmParams:
    """Wire generators and node MLPs for the graph; Kaiming-uniform init."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    comps = graphmod.c2_components(g)
    latent_bound = cfg.latent_bound
    if latent_bound is None:
        latent_bound = max(n.bound for n in g.nodes)

    generators = []
    for comp in comps:
        slots = []
        for _ in range(cfg.mixture_slots):
            g1 = diff.mlp_init([1] + [cfg.g_width1] * (cfg.g_depth1 - 1) + [cfg.latent_dim],
                               rng, output="identity")
            g2 = diff.mlp_init([cfg.latent_dim] + [cfg.g_width2] * (cfg.g_depth2 - 1)
                               + [cfg.latent_dim], rng, output=("clamp", latent_bound))
            slots.append((g1, g2))
        logits = Tensor.param(np.zeros((1, cfg.mixture_slots)))
        generators.append(LatentGenerator(component=tuple(comp), slots=slots,
                                          logits=logits, out_dim=cfg.latent_dim,
                                          bound=latent_bound,
                                          trainable_logits=cfg.trainable_logits))

    node_mlps = {}
    for spec in g.nodes:
        in_dim = sum(g.node(p).width for p in g.parents(spec.name))
        in_dim += sum(cfg.latent_dim for comp in comps if spec.name in comp)
        if in_dim == 0:
            raise ConfigError(f"node {spec.name} has no inputs (impossible wiring)")
        if spec.kind == "categorical":
            out_dim, output = spec.cardinality, ("propensity", 1e-6)
        else:
            out_dim, output = spec.dim, ("clamp", spec.bound)
        dims = [in_dim] + [cfg.f_width] * (cfg.f_depth - 1) + [out_dim]
        node_mlps[spec.name] = diff.mlp_init(dims, rng, output=output)

    params = NcmParams(graph=g, cfg=cfg, node_mlps=node_mlps,
                       generators=generators, components=comps)
    if cfg.lipschitz_cap is not None:
        lipschitz_project(params, cfg.lipschitz_cap)
    return params


def lipschitz_project(p: NcmParams, cap: float, include_generators=None) -> NcmParams:
    """Layer-wise infinity-norm projection in place; structural MLPs always,
    generators only when requested (default: cfg.project_generators)."""
    if cap <= 0:
        raise ConfigError("cap must be positive")
    for mlp in p.node_mlps.values():
        diff.project_linf(mlp, cap)
    if include_generators is None:
        include_generators = p.cfg.project_generators
    if include_generators:
        for gen in p.generators:
            for g1, g2 in gen.slots:
                diff.project_linf(g1, cap)
                diff.project_linf(g2, cap)
    return p


def _generator_sample(gen: LatentGenerator, n, rng, cfg: ArchConfig) -> Tensor:
    """One latent draw per row: mixture of slot push-forwards of Unif[0,1]."""
    outs = []
    for g1, g2 in gen.slots:
        z = Tensor(rng.uniform(0.0, 1.0, size=(n, 1)))
        outs.append(diff.mlp_apply(g2, diff.mlp_apply(g1, z)))
    if len(outs) == 1:
        return outs[0]
    gumb = rng.gumbel(size=(n, len(outs)))
    logit_rows = diff.mul(gen.logits, Tensor(np.ones((n, 1))))  # broadcast to (n, slots)
    w = diff.gumbel_softmax(logit_rows, cfg.tau, gumb, tau_st=cfg.tau_st)
    mixed = None
    for k, v in enumerate(outs):
        wk = diff.col_slice(w, k, k + 1)
        term = diff.mul(v, wk)
        mixed = term if mixed is None else diff.add(mixed, term)
    return mixed


def _categorical_codes(prop: Tensor, rng, cfg: ArchConfig, differentiable):
    """Gumbel-argmax codes from a propensity tensor; straight-through when
    differentiating (hard codes forward, soft-code gradients backward)."""
    n, k = prop.value.shape
    gumb = rng.gumbel(size=(n, k))
    scores = np.log(prop.value) + gumb
    hard_idx = np.argmax(scores, axis=1)
    codes = (hard_idx + 1.0).reshape(n, 1)
    if not differentiable:
        return Tensor(codes)
    logp = diff.tlog(prop)
    w = diff.gumbel_softmax(logp, cfg.tau, gumb, tau_st=cfg.tau_st)
    code_values = Tensor(np.arange(1, k + 1, dtype=float).reshape(k, 1))
    soft_codes = diff.matmul(w, code_values)
    if cfg.tau > 0:
        return soft_codes
    return diff.straight_through(codes, soft_codes)


def ncm_sample(p: NcmParams, n: int, do=None, seed=0, differentiable=False):
    """Draw n rows; returns (SampleBatch, dict node -> Tensor column block).

    Interventions clamp nodes to constants.  With ``differentiable`` the
    returned tensors carry the tape; the SampleBatch always holds hard values.
    """
    if n < 1:
        raise ValueError("n >= 1 required")
    do = dict(do or {})
    rng = np.random.default_rng(seed)
    cfg = p.cfg

    latents = {}
    for comp, gen in zip(p.components, p.generators):
        latents[tuple(comp)] = _generator_sample(gen, n, rng, cfg)

    values: dict[str, Tensor] = {}
    for node in graphmod.topological_order(p.graph):
        spec = p.graph.node(node)
        if node in do:
            values[node] = Tensor(np.full((n, spec.width), float(do[node])))
            continue
        pieces = [values[par] for par in p.graph.parents(node)]
        pieces += [latents[tuple(c)] for c in p.components if node in c]
        x = pieces[0] if len(pieces) == 1 else diff.concat(pieces, axis=1)
        out = diff.mlp_apply(p.node_mlps[node], x)
        if not np.all(np.isfinite(out.value)):
            raise NumericalError(f"non-finite activations at node {node}")
        if spec.kind == "categorical":
            values[node] = _categorical_codes(out, rng, cfg, differentiable)
        else:
            values[node] = out

    data = np.concatenate([values[s.name].value for s in p.graph.nodes], axis=1)
    batch = SampleBatch(p.schema(), data)
    return batch, values


@dataclass
class ObjectiveSpec:
    """E_{t ~ mu_T} E[F(V(t))] minus the same at an optional baseline t0.

    ``outcome`` maps node names to affine coefficients (F = const +
    sum coef * column mean); mu_t is a list of (treatment value, weight) with
    weights summing to 1; values are codes for categorical treatments.
    """

    treat: str
    mu_t: list
    outcome: dict
    const: float = 0.0
    baseline: object = None
    direction: str = "min"

    def __post_init__(self):
        if self.direction not in ("min", "max"):
            raise ConfigError("direction must be min or max")
        w = sum(w for _, w in self.mu_t)
        if abs(w - 1.0) > 1e-9:
            raise ConfigError("mu_t weights must sum to 1")

    @staticmethod
    def ate(treat, outcome_node, t1, t0, direction="min"):
        return ObjectiveSpec(treat=treat, mu_t=[(t1, 1.0)],
                             outcome={outcome_node: 1.0}, baseline=t0,
                             direction=direction)

    @staticmethod
    def uniform_grid(treat, outcome_node, t_lo, t_hi, points, baseline=None,
                     direction="min"):
        ts = np.linspace(t_lo, t_hi, points)
        return ObjectiveSpec(treat=treat, mu_t=[(float(t), 1.0 / points) for t in ts],
                             outcome={outcome_node: 1.0}, baseline=baseline,
                             direction=direction)


def _outcome_mean(p, values, obj) -> Tensor:
    total = Tensor(np.array([[obj.const]]))
    for node, coef in obj.outcome.items():
        col = values[node]
        total = diff.add(total, diff.mul(diff.tmean(diff.tsum(col, axis=1)),
                                         Tensor(float(coef))))
    return total


def estimate_objective(p: NcmParams, obj: ObjectiveSpec, n_mc: int, seed) -> Tensor:
    """Monte-Carlo objective; common random numbers across all t points."""
    total = None
    for t, w in obj.mu_t:
        _, values = ncm_sample(p, n_mc, do={obj.treat: t}, seed=seed,
                               differentiable=True)
        term = diff.mul(_outcome_mean(p, values, obj), Tensor(float(w)))
        total = term if total is None else diff.add(total, term)
    if obj.baseline is not None:
        _, values = ncm_sample(p, n_mc, do={obj.treat: obj.baseline}, seed=seed,
                               differentiable=True)
        total = diff.add(total, diff.mul(_outcome_mean(p, values, obj), Tensor(-1.0)))
    return total


# --------------------------------------------------------------------------
# checkpoints: flat arrays + wiring manifest
# --------------------------------------------------------------------------

def save_ncm(p: NcmParams, array_path, manifest_path):
    arrays = {}
    for node, mlp in p.node_mlps.items():
        for i, (w, b) in enumerate(mlp.layers):
            arrays[f"f/{node}/{i}/w"] = w.value
            arrays[f"f/{node}/{i}/b"] = b.value
    for ci, gen in enumerate(p.generators):
        arrays[f"g/{ci}/logits"] = gen.logits.value
        for si, (g1, g2) in enumerate(gen.slots):
            for i, (w, b) in enumerate(g1.layers):
                arrays[f"g/{ci}/{si}/curve/{i}/w"] = w.value
                arrays[f"g/{ci}/{si}/curve/{i}/b"] = b.value
            for i, (w, b) in enumerate(g2.layers):
                arrays[f"g/{ci}/{si}/homeo/{i}/w"] = w.value
                arrays[f"g/{ci}/{si}/homeo/{i}/b"] = b.value
    manifest = {
        "nodes": [s.name for s in p.graph.nodes],
        "components": [list(gen.component) for gen in p.generators],
        "arch": {k: getattr(p.cfg, k) for k in (
            "f_width", "f_depth", "g_width1", "g_depth1", "g_width2", "g_depth2",
            "mixture_slots", "tau", "tau_st", "latent_dim", "trainable_logits")},
    }
    diff.save_arrays(array_path, arrays, manifest, manifest_path)


def load_ncm_into(p: NcmParams, array_path) -> NcmParams:
    arrays = diff.load_arrays(array_path)
    for node, mlp in p.node_mlps.items():
        for i, (w, b) in enumerate(mlp.layers):
            w.value = arrays[f"f/{node}/{i}/w"]
            b.value = arrays[f"f/{node}/{i}/b"]
    for ci, gen in enumerate(p.generators):
        gen.logits.value = arrays[f"g/{ci}/logits"]
        for si, (g1, g2) in enumerate(gen.slots):
            for i, (w, b) in enumerate(g1.layers):
                w.value = arrays[f"g/{ci}/{si}/curve/{i}/w"]
                b.value = arrays[f"g/{ci}/{si}/curve/{i}/b"]
            for i, (w, b) in enumerate(g2.layers):
                w.value = arrays[f"g/{ci}/{si}/homeo/{i}/w"]
                b.value = arrays[f"g/{ci}/{si}/homeo/{i}/b"]
    return p
