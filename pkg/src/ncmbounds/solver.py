"""Sinkhorn-constrained partial identification via the augmented Lagrangian.

Pipeline: fit the NCM to data (unconstrained Sinkhorn minimization), calibrate
the constraint radius by subsampling, then extremize the causal objective in
both directions subject to S_lam(NCM sample, data) <= alpha, with layer-wise
Lipschitz projection after every step.

Inner steps are stochastic (matched minibatch pairs); outer ALM updates and
feasibility checks run on a probe with the same sample sizes as calibration so
probe values live on alpha's scale.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import diff, ncm as ncmmod, ot
from .diff import Tensor
from .ncm import NcmParams, ObjectiveSpec
from .scm import SampleBatch
from .sharp import InfeasibleError


class DivergenceError(Exception):
    pass


@dataclass
class AlmConfig:
    """Training knobs; defaults follow the reported protocol (600 epochs,
    batch 2048, m_n = n, layer cap 8), desk presets shrink them."""

    epochs: int = 600
    batch: int = 2048
    m_n: int | None = None          # NCM sample size for constraint checks; None -> n
    step_size: float = 1e-3
    bound_step_size: float | None = None  # ALM phase step; None -> step_size
    beta1: float = 0.9
    beta2: float = 0.999
    penalty0: float = 10.0
    penalty_growth: float = 2.0
    multiplier0: float = 0.0
    restarts: int = 3
    steps_per_epoch: int | None = None    # cap on minibatch steps per epoch
    seed: int = 0
    lipschitz_cap: float | None = 8.0
    lam: float | None = None        # Sinkhorn regularization; None -> 0.01 x mean cost
    alpha_override: float | None = None
    fit_epochs: int | None = None   # None -> epochs
    probe_every: int = 10
    sinkhorn_iters: int = 60
    sinkhorn_tol: float = 1e-4
    feas_slack: float = 0.05
    n_mc_objective: int = 2048
    train_float32: bool = True
    calib_subsamples: int = 50
    calib_quantile: float = 0.95
    calib_m_ref: int | None = None  # reference NCM sample size; None -> n

    def validate(self):
        pos = ("epochs", "batch", "step_size", "penalty0", "restarts",
               "probe_every", "sinkhorn_iters", "n_mc_objective", "calib_subsamples")
        for name in pos:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.penalty_growth <= 1.0:
            raise ValueError("penalty_growth must exceed 1")
        if self.multiplier0 < 0:
            raise ValueError("multiplier0 must be >= 0")
        if not (0 < self.calib_quantile <= 1):
            raise ValueError("calib_quantile in (0, 1]")
        return self


@dataclass
class BoundReport:
    direction: str
    value: float
    alpha: float
    final_constraint: float
    feasible: bool
    multiplier_history: list = field(default_factory=list)
    penalty_history: list = field(default_factory=list)
    trace: list = field(default_factory=list)   # (epoch, objective, constraint)
    seed: int = 0
    wall_time: float = 0.0
    lam: float = 0.0
    constraint_inactive: bool = False

    def to_json(self):
        return {
            "direction": self.direction,
            "value": self.value,
            "alpha": self.alpha,
            "final_constraint": self.final_constraint,
            "feasible": self.feasible,
            "multiplier_history": self.multiplier_history,
            "penalty_history": self.penalty_history,
            "trace": [list(t) for t in self.trace],
            "seed": self.seed,
            "wall_time": self.wall_time,
            "lam": self.lam,
            "constraint_inactive": self.constraint_inactive,
        }


class Adam:
    """Adaptive-moment SGD; the inner first-order method of the ALM loop."""

    def __init__(self, params, step_size=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.step = step_size
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def apply(self):
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1 ** self.t)
            vhat = self.v[i] / (1 - self.b2 ** self.t)
            p.value -= self.step * mhat / (np.sqrt(vhat) + self.eps)
            p.grad = None


def _resolve_lam(cfg: AlmConfig, data: SampleBatch) -> float:
    return cfg.lam if cfg.lam is not None else ot.default_lambda(data, seed=cfg.seed)


def _project(params: NcmParams, cfg: AlmConfig):
    if cfg.lipschitz_cap is not None:
        ncmmod.lipschitz_project(params, cfg.lipschitz_cap)


class _Blocks:
    """Fixed minibatch blocks with cached data-side Sinkhorn self-terms.

    The data self-term of the debiased divergence carries no parameter
    gradient and blocks are fixed per run, so each block's term is solved
    once and reused every epoch.
    """

    def __init__(self, data: SampleBatch, batch, lam, cfg, rng):
        n = data.n
        batch = min(batch, n)
        perm = rng.permutation(n)
        self.blocks = [data.data[perm[lo:lo + batch]]
                       for lo in range(0, n - batch + 1, batch)]
        self.lam = lam
        self.cfg = cfg
        self._self_values = [None] * len(self.blocks)

    def __len__(self):
        return len(self.blocks)

    def loss(self, params, block_id, seed):
        blk = self.blocks[block_id]
        dtype = np.float32 if self.cfg.train_float32 else np.float64
        if self._self_values[block_id] is None:
            self._self_values[block_id] = ot.self_cost(
                blk, self.lam, self.cfg.sinkhorn_iters, self.cfg.sinkhorn_tol,
                dtype=dtype)
        sample, values = ncmmod.ncm_sample(params, blk.shape[0], seed=seed,
                                           differentiable=True)
        cols = [values[s.name] for s in params.graph.nodes]
        x = cols[0] if len(cols) == 1 else diff.concat(cols, axis=1)
        res = ot.sinkhorn_divergence(
            x, blk, self.lam, max_iters=self.cfg.sinkhorn_iters,
            tol=self.cfg.sinkhorn_tol, y_self_value=self._self_values[block_id],
            dtype=dtype)
        return res.value


def fit_observational(params: NcmParams, data: SampleBatch, cfg: AlmConfig) -> NcmParams:
    """Unconstrained Sinkhorn minimization; returns the best-seen parameters."""
    cfg.validate()
    lam = _resolve_lam(cfg, data)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(params.parameters(), cfg.step_size, cfg.beta1, cfg.beta2)
    blocks = _Blocks(data, cfg.batch, lam, cfg, rng)
    epochs = cfg.fit_epochs if cfg.fit_epochs is not None else cfg.epochs
    best_loss, best_params = math.inf, params.clone()
    step_seed = int(rng.integers(0, 2 ** 31))
    for epoch in range(epochs):
        order = rng.permutation(len(blocks))
        if cfg.steps_per_epoch is not None:
            order = order[:cfg.steps_per_epoch]
        epoch_loss = 0.0
        for k, block_id in enumerate(order):
            loss = blocks.loss(params, int(block_id),
                               seed=int(step_seed + epoch * 1000 + k))
            val = loss.item()
            if not np.isfinite(val):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            diff.backward(loss)
            opt.apply()
            _project(params, cfg)
            epoch_loss += val
        avg = epoch_loss / max(len(order), 1)
        if avg < best_loss:
            best_loss = avg
            best_params = params.clone()
    return best_params


def subsample_size(n: int) -> int:
    """The b = floor(15 sqrt(n)) subsampling rule."""
    return min(n, int(math.floor(15.0 * math.sqrt(n))))


def _ncm_matrix(params, m, seed):
    sample, _ = ncmmod.ncm_sample(params, m, seed=seed, differentiable=False)
    return sample.data


def calibrate_radius(data: SampleBatch, params: NcmParams, cfg: AlmConfig,
                     b=None, seed=None) -> float:
    """quantile_q over B subsample-vs-NCM Sinkhorn distances.

    Subsamples are drawn without replacement at size b = floor(15 sqrt(n));
    the NCM reference sample has size m_ref (defaults to n) and is shared
    across subsamples so its self-term is computed once.
    """
    cfg.validate()
    n = data.n
    b = subsample_size(n) if b is None else min(n, b)
    if b < 2:
        raise ValueError("need subsample size >= 2")
    seed = cfg.seed if seed is None else seed
    lam = _resolve_lam(cfg, data)
    m_ref = cfg.calib_m_ref if cfg.calib_m_ref is not None else n
    rng = np.random.default_rng(seed)
    ref = _ncm_matrix(params, m_ref, seed=int(rng.integers(0, 2 ** 31)))

    v_ref, _, _, _ = ot._ot_value_and_plan(ref, ref, lam, cfg.sinkhorn_iters,
                                           cfg.sinkhorn_tol, symmetric=True)
    dists = []
    for _ in range(cfg.calib_subsamples):
        idx = rng.permutation(n)[:b]
        sub = data.data[idx]
        v_xy, _, _, _ = ot._ot_value_and_plan(sub, ref, lam, cfg.sinkhorn_iters,
                                              cfg.sinkhorn_tol)
        v_xx, _, _, _ = ot._ot_value_and_plan(sub, sub, lam, cfg.sinkhorn_iters,
                                              cfg.sinkhorn_tol, symmetric=True)
        dists.append(v_xy - 0.5 * v_xx - 0.5 * v_ref)
    return float(np.quantile(np.asarray(dists), cfg.calib_quantile))


class _Probe:
    """Constraint probe on alpha's scale: S_lam(data subsample of size b,
    NCM sample of size m_n), with the fixed subsample's self-term cached."""

    def __init__(self, data, probe_idx, lam, cfg):
        self.sub = data.data[probe_idx]
        self.lam = lam
        self.cfg = cfg
        # same NCM reference size as calibration so probe values share alpha's scale
        if cfg.calib_m_ref is not None:
            self.m_n = cfg.calib_m_ref
        else:
            self.m_n = cfg.m_n if cfg.m_n is not None else data.n
        self.iters = max(cfg.sinkhorn_iters, 48)
        self.sub_self = ot.self_cost(self.sub, lam, self.iters, cfg.sinkhorn_tol)

    def __call__(self, params, seed):
        sample = _ncm_matrix(params, self.m_n, seed=seed)
        r = ot.sinkhorn_divergence(sample, self.sub, self.lam,
                                   max_iters=self.iters, tol=self.cfg.sinkhorn_tol,
                                   y_self_value=self.sub_self)
        return float(r)


def final_constraint_value(params, data, lam, cfg, seed=1234) -> float:
    """S_lam(P_m_n(NCM), P_n(data)) at full sizes for the report."""
    m_n = cfg.m_n if cfg.m_n is not None else data.n
    sample = _ncm_matrix(params, m_n, seed=seed)
    r = ot.sinkhorn_divergence(sample, data.data, lam,
                               max_iters=max(cfg.sinkhorn_iters, 80),
                               tol=cfg.sinkhorn_tol)
    return float(r)


def solve_bound(params0: NcmParams, data: SampleBatch, obj: ObjectiveSpec,
                alpha: float, cfg: AlmConfig) -> tuple[BoundReport, NcmParams]:
    """ALM extremization of the objective inside the Sinkhorn ball.

    Raises InfeasibleError when no probed iterate lands within
    alpha * (1 + feas_slack); the best violation rides on the exception.
    """
    cfg.validate()
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    t_start = time.time()
    lam = _resolve_lam(cfg, data)
    sign = 1.0 if obj.direction == "min" else -1.0
    params = params0.clone()
    rng = np.random.default_rng(cfg.seed)
    step = cfg.bound_step_size if cfg.bound_step_size is not None else cfg.step_size
    opt = Adam(params.parameters(), step, cfg.beta1, cfg.beta2)
    n = data.n
    batch = min(cfg.batch, n)
    u = cfg.multiplier0
    rho = cfg.penalty0
    probe_idx = rng.permutation(n)[:subsample_size(n)]
    probe = _Probe(data, probe_idx, lam, cfg)
    blocks = _Blocks(data, batch, lam, cfg, rng)
    probe_seed = int(rng.integers(0, 2 ** 31))
    obj_seed = int(rng.integers(0, 2 ** 31))
    step_seed = int(rng.integers(0, 2 ** 31))

    feas_cap = alpha * (1.0 + cfg.feas_slack)
    constraint_inactive = alpha >= 1e8

    mult_hist, pen_hist, trace = [], [], []
    best_val, best_params, best_g = None, None, None
    prev_violation = None

    def outer_update(epoch):
        nonlocal u, rho, prev_violation, best_val, best_params, best_g
        g_val = probe(params, probe_seed)
        obj_val = estimate_obj_value(params, obj, cfg, obj_seed)
        trace.append((epoch, obj_val, g_val))
        feasible = g_val <= feas_cap
        if feasible:
            score = sign * obj_val
            if best_val is None or score < best_val:
                best_val = score
                best_params = params.clone()
                best_g = g_val
        violation = max(0.0, g_val - alpha)
        u = max(0.0, u + rho * (g_val - alpha))
        if prev_violation is not None and violation > 0.9 * prev_violation and violation > 0:
            rho *= cfg.penalty_growth
        prev_violation = violation
        mult_hist.append(u)
        pen_hist.append(rho)

    outer_update(0)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(blocks))
        if cfg.steps_per_epoch is not None:
            order = order[:cfg.steps_per_epoch]
        for k, block_id in enumerate(order):
            seed_k = int(step_seed + epoch * 1000 + k)
            g_t = blocks.loss(params, int(block_id), seed=seed_k)
            f_t = estimate_objective_tensor(params, obj, batch, seed_k)
            slack = diff.add(g_t, Tensor(-alpha))
            hinge = diff.relu(slack)
            loss = diff.add(diff.mul(f_t, Tensor(sign)),
                            diff.add(diff.mul(hinge, Tensor(u)),
                                     diff.mul(diff.mul(hinge, hinge), Tensor(rho / 2.0))))
            val = loss.item()
            if not np.isfinite(val):
                raise DivergenceError(f"non-finite ALM loss at epoch {epoch}")
            diff.backward(loss)
            opt.apply()
            _project(params, cfg)
        if epoch % cfg.probe_every == 0 or epoch == cfg.epochs:
            outer_update(epoch)

    if best_params is None:
        best_violation = min((max(0.0, g - alpha) for _, _, g in trace), default=math.inf)
        raise InfeasibleError(
            f"no iterate satisfied g <= alpha(1+{cfg.feas_slack}); "
            f"best violation {best_violation:.4g}", best_violation=best_violation)

    final_g = final_constraint_value(best_params, data, lam, cfg)
    report = BoundReport(
        direction=obj.direction,
        value=float(sign * best_val),
        alpha=float(alpha),
        final_constraint=final_g,
        feasible=best_g <= feas_cap,
        multiplier_history=mult_hist,
        penalty_history=pen_hist,
        trace=trace,
        seed=cfg.seed,
        wall_time=time.time() - t_start,
        lam=lam,
        constraint_inactive=constraint_inactive,
    )
    return report, best_params


def estimate_objective_tensor(params, obj, n_mc, seed) -> Tensor:
    return ncmmod.estimate_objective(params, obj, n_mc, seed)


def estimate_obj_value(params, obj, cfg, seed) -> float:
    return ncmmod.estimate_objective(params, obj, cfg.n_mc_objective, seed).item()


@dataclass
class PartialIdResult:
    lower: BoundReport
    upper: BoundReport
    alpha: float
    lam: float
    fitted: NcmParams
    crossover_warning: bool = False


def partial_id(g, data: SampleBatch, obj: ObjectiveSpec, cfg: AlmConfig,
               arch=None) -> PartialIdResult:
    """fit -> calibrate -> min and max bounds over restarts, extremal feasible."""
    cfg.validate()
    arch = arch if arch is not None else ncmmod.ArchConfig()
    arch.lipschitz_cap = cfg.lipschitz_cap
    lam = _resolve_lam(cfg, data)
    cfg = replace(cfg, lam=lam)
    base = ncmmod.build_ncm(g, arch, seed=cfg.seed)
    fitted = fit_observational(base, data, cfg)
    if cfg.alpha_override is not None:
        alpha = cfg.alpha_override
    else:
        alpha = calibrate_radius(data, fitted, cfg)

    reports = {"min": [], "max": []}
    for direction in ("min", "max"):
        for r in range(cfg.restarts):
            run_cfg = replace(cfg, seed=cfg.seed + 1000 * r + (0 if direction == "min" else 500))
            run_obj = replace(obj, direction=direction)
            try:
                rep, _ = solve_bound(fitted, data, run_obj, alpha, run_cfg)
            except InfeasibleError:
                continue
            reports[direction].append(rep)
    if not reports["min"] or not reports["max"]:
        raise InfeasibleError("no feasible bound found in any restart")
    lower = min(reports["min"], key=lambda r: r.value)
    upper = max(reports["max"], key=lambda r: r.value)
    crossover = False
    if lower.value > upper.value:
        # numerical crossover: swap values to restore lower <= upper, flag it
        crossover = True
        lo_v, up_v = upper.value, lower.value
        lower, upper = replace(lower, value=lo_v), replace(upper, value=up_v)
    return PartialIdResult(lower=lower, upper=upper, alpha=alpha, lam=lam,
                           fitted=fitted, crossover_warning=crossover)
