"""Erasure training loops.

Two correlation-driven methods share one loop: broad fine-tuning of dense
cross-attention increments, and the decoupled method that optimizes null-space
combination coefficients per erased concept (jointly, one run per concept, or
iteratively with constraints rebuilt from the concepts known so far).
Reference baselines that regress the conditional prediction onto a target, or
suppress attention mass, reuse the same plumbing without the early stop.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nm
from .concept_repr import CorrState, delta_eps, eta_weights, momentum_step
from .numerics import Array, NumericalError, Var
from .toy_diffusion import (
    Adam,
    ConceptSet,
    DenoiserParams,
    NoiseSchedule,
    ToyDataset,
    cross_attention_layer_names,
    denoise_predict,
    forward_diffuse,
    forward_tape,
    kv_layer_names,
)
from .weight_decoupling import (
    ConstraintSystem,
    EraserSet,
    WeightIncrement,
    build_constraint,
    delta_norm,
    realize_dense,
)

SCOPE_KV = "to_k_to_v"
SCOPE_XATTN = "all_cross_attention"
BASELINE_KINDS = ("esd", "sdd", "abconcept", "fmn")

ITERATIVE_SCOPE_NOTE = (
    "iterative step 1 fine-tunes all cross-attention layers; that increment "
    "is dense and protects nothing exactly"
)


@dataclass(frozen=True)
class EraseHyper:
    """Shared erasure hyperparameters.

    lr defaults per method when left None: 1e-6 for the dense correlation
    method, 1e-2 for the decoupled one. batch defaults to the number of
    erased concepts and counts draws per concept per iteration.
    """

    lr: float | None = None
    dense_lr: float | None = None  # iterative step 1 only; defaults like the dense method
    max_iters: int = 1000
    tau: float = 0.0
    tau_overrides: Mapping[str, float] = field(default_factory=dict)
    alpha: float = 0.9
    scale: float = 1e-4        # null-space increment scaling
    reg_weight: float = 3e-5
    reg_mode: str = "l1_mean"
    corr_mode: str = "product"
    batch: int | None = None
    seed: int = 0
    editable_scope: str | None = None

    def resolved_lr(self, method: str) -> float:
        if self.lr is not None:
            return self.lr
        return 1e-2 if method == "sepme" else 1e-6

    def resolved_batch(self, n_forgotten: int) -> int:
        b = self.batch if self.batch is not None else n_forgotten
        if b < 1:
            raise ValueError("batch must be at least 1")
        return b

    def tau_for(self, concept: str) -> float:
        return float(self.tau_overrides.get(concept, self.tau))


@dataclass
class EraseReport:
    """Per-run record: traces, stop bookkeeping, and the increment size."""

    method: str
    mode: str | None
    concepts: tuple[str, ...]
    tau: float
    alpha: float
    iters_run: int
    stop_reason: str
    final_momentum: float | None
    momentum_trace: list[float]
    balanced_trace: list[float]
    l_cor_trace: dict[str, list[float]]
    eta_trace: dict[str, list[float]]
    reg_trace: list[float]
    delta_norm: float
    scope_layers: tuple[str, ...] = ()
    notes: tuple[str, ...] = ()


def balanced_from_traces(report: EraseReport) -> list[float]:
    """Recompute balanced sums from logged per-concept losses and weights."""
    out = []
    for k in range(len(report.balanced_trace)):
        acc = 0.0
        for i, name in enumerate(report.concepts):
            term = report.eta_trace[name][k] * report.l_cor_trace[name][k]
            acc = term if i == 0 else acc + term
        out.append(acc)
    return out


# ---------------------------------------------------------------------------
# loss nodes


def _scope_layers(dims, scope: str) -> list[str]:
    if scope == SCOPE_KV:
        return kv_layer_names(dims)
    if scope == SCOPE_XATTN:
        return cross_attention_layer_names(dims)
    raise ValueError(f"unknown editable scope {scope!r}")


def corr_node(base, handles, emb, blank, x_t, t_idx, d_ori, mode: str) -> Var:
    """Taped correlation between the frozen signature and the edited one."""
    e_c = forward_tape(handles, base.dims, x_t, emb.tokens, t_idx)
    e_b = forward_tape(handles, base.dims, x_t, blank.tokens, t_idx)
    d_new = nm.sub(e_c, e_b)
    if mode == "product":
        return nm.mean_all(nm.mul(nm.const(d_ori), d_new))
    if mode == "cosine":
        num = nm.sum_all(nm.mul(nm.const(d_ori), d_new))
        sq = nm.scale(nm.sum_all(nm.square(d_new)), float(np.sum(d_ori * d_ori)))
        den = nm.add(nm.sqrt_val(sq), nm.const(np.float64(1e-30)))
        return nm.div(num, den)
    raise ValueError(f"unknown corr mode {mode!r}")


def reg_node(leaves: Mapping[str, Var], mode: str) -> Var:
    """Size penalty over the trainable matrices."""
    parts = list(leaves.values())
    if mode == "l1_mean":
        acc = nm.sum_all(nm.abs_val(parts[0]))
        for p in parts[1:]:
            acc = nm.add(acc, nm.sum_all(nm.abs_val(p)))
        return nm.scale(acc, 1.0 / len(parts))
    if mode == "l2":
        acc = nm.sum_all(nm.square(parts[0]))
        for p in parts[1:]:
            acc = nm.add(acc, nm.sum_all(nm.square(p)))
        return nm.sqrt_val(acc)
    raise ValueError(f"unknown norm mode {mode!r}")


# ---------------------------------------------------------------------------
# edit parameterizations


class _DenseEdit:
    """Raw additive deltas on a fixed layer set, shared by all concepts."""

    def __init__(self, base: DenoiserParams, layers: Sequence[str]):
        self.base = base
        self.trainable = {l: np.zeros_like(base.values[l]) for l in layers}

    def leaves(self) -> dict[str, Var]:
        return {k: Var(v) for k, v in self.trainable.items()}

    def handles(self, concept: str, leaves: Mapping[str, Var]) -> dict[str, Var]:
        out = {}
        for name, arr in self.base.values.items():
            out[name] = nm.add(nm.const(arr), leaves[name]) if name in leaves else nm.const(arr)
        return out

    def composite_deltas(self) -> dict[str, Array]:
        return {k: v.copy() for k, v in self.trainable.items()}


class _DecoupledEdit:
    """Per-concept combination coefficients over null-space bases."""

    def __init__(self, base: DenoiserParams, systems: Mapping[str, ConstraintSystem],
                 scale: float):
        self.base = base
        self.systems = dict(systems)
        self.scale = float(scale)
        self.kv = kv_layer_names(base.dims)
        self.trainable = {}
        for name, system in self.systems.items():
            free = system.null_basis.shape[1]
            for layer in self.kv:
                self.trainable[f"{name}/{layer}"] = np.zeros((base.dims.attn_dim, free))

    def leaves(self) -> dict[str, Var]:
        return {k: Var(v) for k, v in self.trainable.items()}

    def handles(self, concept: str, leaves: Mapping[str, Var]) -> dict[str, Var]:
        system = self.systems[concept]
        basis_t = nm.const(self.scale * system.null_basis.T)
        out = {}
        for name, arr in self.base.values.items():
            if name in self.kv:
                delta = nm.transpose(nm.matmul(leaves[f"{concept}/{name}"], basis_t))
                out[name] = nm.add(nm.const(arr), delta)
            else:
                out[name] = nm.const(arr)
        return out

    def increment(self, concept: str) -> WeightIncrement:
        system = self.systems[concept]
        return WeightIncrement(
            concept=concept,
            kind="decoupled",
            layers={l: self.trainable[f"{concept}/{l}"].copy() for l in self.kv},
            preserved=system.preserved,
            null_basis=system.null_basis,
            scale=self.scale,
        )

    def composite_deltas(self) -> dict[str, Array]:
        out = {l: np.zeros_like(self.base.values[l]) for l in self.kv}
        for name, system in self.systems.items():
            for layer in self.kv:
                out[layer] += realize_dense(
                    self.trainable[f"{name}/{layer}"], system.null_basis, self.scale
                )
        return out


# ---------------------------------------------------------------------------
# shared optimization loop


def _optimize(base, names, data, concepts, schedule, hyper, edit, tau_run,
              method, mode, scope_layers, batch, notes=()) -> EraseReport:
    blank = concepts.blank
    adam = Adam(hyper.resolved_lr(method))
    gens = {n: nm.child_rng(hyper.seed, "erase", n) for n in names}
    state = CorrState.initial(hyper.alpha, tau_run)

    l_cor_trace = {n: [] for n in names}
    eta_trace = {n: [] for n in names}
    momentum_trace, balanced_trace, reg_trace = [], [], []
    stop_reason = "max_iters"
    iters_run = 0

    for it in range(1, hyper.max_iters + 1):
        iters_run = it
        leaves = edit.leaves()
        nodes, values = [], []
        for name in names:
            g = gens[name]
            emb = concepts.get(name)
            x0 = data.sample(name, batch, g)
            t_idx = g.integers(1, schedule.timesteps + 1, size=batch)
            eps = g.standard_normal((batch, base.dims.data_dim))
            x_t = forward_diffuse(x0, t_idx, eps, schedule)
            d_ori = delta_eps(base, x_t, emb, blank, t_idx)
            handles = edit.handles(name, leaves)
            node = corr_node(base, handles, emb, blank, x_t, t_idx, d_ori, hyper.corr_mode)
            nodes.append(node)
            values.append(float(node.value))
        eta = eta_weights(values)
        balanced = nm.scale(nodes[0], float(eta[0]))
        for i in range(1, len(nodes)):
            balanced = nm.add(balanced, nm.scale(nodes[i], float(eta[i])))
        s = float(balanced.value)
        reg = reg_node(leaves, hyper.reg_mode)
        objective = nm.add(balanced, nm.scale(reg, hyper.reg_weight))
        if not np.isfinite(float(objective.value)):
            raise NumericalError(f"non-finite erasure objective at iteration {it}")

        for i, name in enumerate(names):
            l_cor_trace[name].append(values[i])
            eta_trace[name].append(float(eta[i]))
        balanced_trace.append(s)
        reg_trace.append(float(reg.value))
        state, stop = momentum_step(state, s)
        momentum_trace.append(state.momentum)
        if stop:
            stop_reason = "early_stop"
            break
        adam.step(edit.trainable, nm.grads(objective, leaves))

    return EraseReport(
        method=method,
        mode=mode,
        concepts=tuple(names),
        tau=tau_run,
        alpha=hyper.alpha,
        iters_run=iters_run,
        stop_reason=stop_reason,
        final_momentum=momentum_trace[-1] if momentum_trace else None,
        momentum_trace=momentum_trace,
        balanced_trace=balanced_trace,
        l_cor_trace=l_cor_trace,
        eta_trace=eta_trace,
        reg_trace=reg_trace,
        delta_norm=delta_norm(edit.composite_deltas(), "l1_mean"),
        scope_layers=tuple(scope_layers),
        notes=tuple(notes),
    )


# ---------------------------------------------------------------------------
# dense correlation method


def train_gcirs(
    theta: DenoiserParams,
    forgotten: Sequence[str],
    data: ToyDataset,
    concepts: ConceptSet,
    schedule: NoiseSchedule,
    hyper: EraseHyper,
) -> tuple[dict[str, Array], EraseReport]:
    """One dense increment over the editable scope, erasing all concepts at once."""
    names = _check_forgotten(forgotten, concepts)
    scope = hyper.editable_scope or SCOPE_XATTN
    layers = _scope_layers(theta.dims, scope)
    tau_run = hyper.tau_for(names[0]) if len(names) == 1 else hyper.tau
    edit = _DenseEdit(theta, layers)
    report = _optimize(theta, names, data, concepts, schedule, hyper, edit,
                       tau_run, "gcirs", None, layers,
                       hyper.resolved_batch(len(names)))
    deltas = edit.composite_deltas()
    for d in deltas.values():
        d.flags.writeable = False
    return deltas, report


# ---------------------------------------------------------------------------
# decoupled method


def train_sepme(
    theta: DenoiserParams,
    forgotten: Sequence[str],
    data: ToyDataset,
    concepts: ConceptSet,
    schedule: NoiseSchedule,
    hyper: EraseHyper,
    mode: str = "separate",
) -> tuple[EraserSet, list[EraseReport]]:
    """Null-space erasure in one of three modes.

    simultaneous: one run optimizing every concept's coefficients jointly.
    separate: one run per concept, constraints built from the full set.
    iterative: concept 1 via the dense method over all cross-attention
    layers, later concepts constrained by the concepts seen so far only.
    """
    names = _check_forgotten(forgotten, concepts)
    if hyper.editable_scope not in (None, SCOPE_KV):
        raise ValueError("the decoupled method edits key/value projections only")
    embs = [concepts.get(n) for n in names]
    eraser = EraserSet(theta)
    reports: list[EraseReport] = []
    kv = kv_layer_names(theta.dims)
    batch = hyper.resolved_batch(len(names))

    if mode == "simultaneous":
        systems = {n: build_constraint(embs, i, concepts.blank) for i, n in enumerate(names)}
        edit = _DecoupledEdit(theta, systems, hyper.scale)
        if hyper.tau_overrides:
            tau_run = sum(hyper.tau_for(n) for n in names)
        else:
            tau_run = hyper.tau
        report = _optimize(theta, names, data, concepts, schedule, hyper, edit,
                           tau_run, "sepme", mode, kv, batch)
        reports.append(report)
        for name in names:
            eraser.add(edit.increment(name))
    elif mode == "separate":
        for i, name in enumerate(names):
            system = build_constraint(embs, i, concepts.blank)
            edit = _DecoupledEdit(theta, {name: system}, hyper.scale)
            report = _optimize(theta, [name], data, concepts, schedule, hyper, edit,
                               hyper.tau_for(name), "sepme", mode, kv, batch)
            reports.append(report)
            eraser.add(edit.increment(name))
    elif mode == "iterative":
        first = names[0]
        gcirs_layers = _scope_layers(theta.dims, SCOPE_XATTN)
        edit = _DenseEdit(theta, gcirs_layers)
        step1 = replace(hyper, lr=hyper.dense_lr if hyper.dense_lr is not None else 1e-6)
        report = _optimize(theta, [first], data, concepts, schedule, step1, edit,
                           hyper.tau_for(first), "gcirs", mode, gcirs_layers, batch,
                           notes=(ITERATIVE_SCOPE_NOTE,))
        reports.append(report)
        eraser.add(WeightIncrement(concept=first, kind="dense",
                                   layers=edit.composite_deltas(), preserved=()))
        for t in range(1, len(names)):
            system = build_constraint(embs[: t + 1], t, concepts.blank)
            edit = _DecoupledEdit(theta, {names[t]: system}, hyper.scale)
            report = _optimize(theta, [names[t]], data, concepts, schedule, hyper, edit,
                               hyper.tau_for(names[t]), "sepme", mode, kv, batch)
            reports.append(report)
            eraser.add(edit.increment(names[t]))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return eraser, reports


def _check_forgotten(forgotten: Sequence[str], concepts: ConceptSet) -> list[str]:
    names = list(forgotten)
    if not names:
        raise ValueError("need at least one concept to erase")
    if len(set(names)) != len(names):
        raise ValueError("forgotten concepts must be distinct")
    for n in names:
        concepts.get(n)
    return names


# ---------------------------------------------------------------------------
# baselines


def baseline_target(kind, theta, x_t, t, c_f, blank, anchor=None, eta: float = 1.0):
    """Frozen regression target for the targeted baselines."""
    if kind == "sdd":
        return denoise_predict(theta, x_t, blank, t)
    if kind == "esd":
        eps_blank = denoise_predict(theta, x_t, blank, t)
        eps_c = denoise_predict(theta, x_t, c_f, t)
        return (1.0 + eta) * eps_blank - eta * eps_c
    if kind == "abconcept":
        if anchor is None:
            raise ValueError("the anchor-based baseline needs an anchor concept")
        return denoise_predict(theta, x_t, anchor, t)
    raise ValueError(f"no regression target for baseline kind {kind!r}")


def train_baseline(
    kind: str,
    theta: DenoiserParams,
    forgotten: Sequence[str],
    data: ToyDataset,
    concepts: ConceptSet,
    schedule: NoiseSchedule,
    hyper: EraseHyper,
    iters: int,
    anchors: Mapping[str, str] | None = None,
    esd_eta: float = 1.0,
) -> tuple[dict[str, Array], EraseReport]:
    """Fixed-iteration baselines: regression onto a target prediction, or
    suppression of attention mass on the forgotten concept's tokens."""
    if kind not in BASELINE_KINDS:
        raise ValueError(f"unknown baseline kind {kind!r}")
    if iters < 0:
        raise ValueError("iters must be non-negative")
    names = _check_forgotten(forgotten, concepts)
    if kind == "abconcept":
        anchors = dict(anchors or {})
        missing = [n for n in names if n not in anchors]
        if missing:
            raise ValueError(f"no anchor concept for {missing}")
    blank = concepts.blank
    scope = hyper.editable_scope or SCOPE_XATTN
    layers = _scope_layers(theta.dims, scope)
    edit = _DenseEdit(theta, layers)
    batch = hyper.resolved_batch(len(names))
    adam = Adam(hyper.lr if hyper.lr is not None else 1e-2)
    gens = {n: nm.child_rng(hyper.seed, "erase", n) for n in names}
    token_count = theta.dims.token_count
    positions = np.arange(token_count, 2 * token_count)
    trace = []

    for it in range(1, iters + 1):
        leaves = edit.leaves()
        loss = None
        for name in names:
            g = gens[name]
            emb = concepts.get(name)
            x0 = data.sample(name, batch, g)
            t_idx = g.integers(1, schedule.timesteps + 1, size=batch)
            eps = g.standard_normal((batch, theta.dims.data_dim))
            x_t = forward_diffuse(x0, t_idx, eps, schedule)
            handles = edit.handles(name, leaves)
            if kind == "fmn":
                stacked = np.vstack([blank.tokens, emb.tokens])
                _, attns = forward_tape(handles, theta.dims, x_t, stacked, t_idx,
                                        collect_attn=True)
                node = None
                for attn in attns:
                    mass = nm.scale(nm.mean_all(nm.take_cols(attn, positions)),
                                    float(len(positions)))
                    node = mass if node is None else nm.add(node, mass)
                node = nm.scale(node, 1.0 / len(attns))
            else:
                anchor = concepts.get(anchors[name]) if kind == "abconcept" else None
                target = baseline_target(kind, theta, x_t, t_idx, emb, blank,
                                         anchor=anchor, eta=esd_eta)
                pred = forward_tape(handles, theta.dims, x_t, emb.tokens, t_idx)
                node = nm.scale(nm.sum_all(nm.square(nm.sub(pred, nm.const(target)))),
                                1.0 / batch)
            loss = node if loss is None else nm.add(loss, node)
        val = float(loss.value)
        if not np.isfinite(val):
            raise NumericalError(f"non-finite baseline loss at iteration {it}")
        trace.append(val)
        adam.step(edit.trainable, nm.grads(loss, leaves))

    deltas = edit.composite_deltas()
    for d in deltas.values():
        d.flags.writeable = False
    report = EraseReport(
        method=kind,
        mode=None,
        concepts=tuple(names),
        tau=0.0,
        alpha=hyper.alpha,
        iters_run=iters,
        stop_reason="max_iters",
        final_momentum=None,
        momentum_trace=[],
        balanced_trace=trace,
        l_cor_trace={},
        eta_trace={},
        reg_trace=[],
        delta_norm=delta_norm(deltas, "l1_mean"),
        scope_layers=tuple(layers),
    )
    return deltas, report


# ---------------------------------------------------------------------------
# objective builders for gradient checking


def sample_corr_draws(base, names, data, concepts, schedule, batch, seed):
    """Fixed (x_t, t, frozen signature) draws, one bundle per concept."""
    draws = {}
    for name in names:
        g = nm.child_rng(seed, "erase", name)
        x0 = data.sample(name, batch, g)
        t_idx = g.integers(1, schedule.timesteps + 1, size=batch)
        eps = g.standard_normal((batch, base.dims.data_dim))
        x_t = forward_diffuse(x0, t_idx, eps, schedule)
        d_ori = delta_eps(base, x_t, concepts.get(name), concepts.blank, t_idx)
        draws[name] = (x_t, t_idx, d_ori)
    return draws


def gcirs_objective(base, names, concepts, draws, eta, scope_layers, hyper):
    """Loss closure over dense deltas with frozen balance weights."""

    def loss_fn(leaves):
        nodes = []
        for name in names:
            x_t, t_idx, d_ori = draws[name]
            handles = {}
            for lname, arr in base.values.items():
                handles[lname] = (nm.add(nm.const(arr), leaves[lname])
                                  if lname in leaves else nm.const(arr))
            nodes.append(corr_node(base, handles, concepts.get(name), concepts.blank,
                                   x_t, t_idx, d_ori, hyper.corr_mode))
        acc = nm.scale(nodes[0], float(eta[0]))
        for i in range(1, len(nodes)):
            acc = nm.add(acc, nm.scale(nodes[i], float(eta[i])))
        return nm.add(acc, nm.scale(reg_node(leaves, hyper.reg_mode), hyper.reg_weight))

    return loss_fn


def sepme_objective(base, names, concepts, draws, eta, systems, hyper):
    """Loss closure over per-concept combination coefficients."""
    kv = kv_layer_names(base.dims)

    def loss_fn(leaves):
        nodes = []
        for name in names:
            x_t, t_idx, d_ori = draws[name]
            basis_t = nm.const(hyper.scale * systems[name].null_basis.T)
            handles = {}
            for lname, arr in base.values.items():
                if lname in kv:
                    delta = nm.transpose(nm.matmul(leaves[f"{name}/{lname}"], basis_t))
                    handles[lname] = nm.add(nm.const(arr), delta)
                else:
                    handles[lname] = nm.const(arr)
            nodes.append(corr_node(base, handles, concepts.get(name), concepts.blank,
                                   x_t, t_idx, d_ori, hyper.corr_mode))
        acc = nm.scale(nodes[0], float(eta[0]))
        for i in range(1, len(nodes)):
            acc = nm.add(acc, nm.scale(nodes[i], float(eta[i])))
        return nm.add(acc, nm.scale(reg_node(leaves, hyper.reg_mode), hyper.reg_weight))

    return loss_fn


# ---------------------------------------------------------------------------
# trace persistence


def write_trace_csv(path, report: EraseReport) -> None:
    """Per-step rows; float fields use repr so values round-trip exactly."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "concept", "L_cor", "eta", "L_mom", "reg"])
        for k in range(report.iters_run):
            for name in report.concepts:
                writer.writerow([
                    k + 1,
                    name,
                    repr(report.l_cor_trace[name][k]) if report.l_cor_trace else "",
                    repr(report.eta_trace[name][k]) if report.eta_trace else "",
                    repr(report.momentum_trace[k]) if report.momentum_trace else "",
                    repr(report.reg_trace[k]) if report.reg_trace else "",
                ])


def read_trace_csv(path):
    """Returns rows of (iter, concept, L_cor, eta, L_mom, reg)."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["iter", "concept", "L_cor", "eta", "L_mom", "reg"]:
            raise ValueError("unexpected trace header")
        for rec in reader:
            rows.append((
                int(rec[0]),
                rec[1],
                float(rec[2]) if rec[2] else None,
                float(rec[3]) if rec[3] else None,
                float(rec[4]) if rec[4] else None,
                float(rec[5]) if rec[5] else None,
            ))
    return rows
