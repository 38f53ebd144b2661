"""Desk-scale evaluation: nearest-centroid accuracy, a same-seed sample
distance proxy, post-hoc correlation diagnostics, the tau ablation sweep,
and the exhaustive subset separability suite."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .concept_repr import corr_value, delta_eps
from .erasure_trainers import EraseHyper, train_sepme
from .numerics import Array, NumericalError, child_rng
from .toy_diffusion import (
    BLANK,
    ConceptSet,
    DenoiserParams,
    NoiseSchedule,
    ToyDataset,
    forward_diffuse,
    sample,
)
from .weight_decoupling import EraserSet, delta_norm, restoration_check

_CORR_PROBES = 64


def _stream_seed(seed: int, tag: str, name: str) -> int:
    return int(child_rng(seed, tag, name).integers(0, 2**63))


# ---------------------------------------------------------------------------
# classifier


@dataclass(frozen=True)
class ToyClassifier:
    """Nearest-centroid decision over concept classes plus blank."""

    classes: tuple[str, ...]
    centroids: Array  # (n_classes, data_dim), read-only
    holdout_accuracy: float
    n_train: int
    seed: int

    def classify(self, x: Array) -> Array:
        d = np.linalg.norm(x[:, None, :] - self.centroids[None], axis=2)
        return np.argmin(d, axis=1)

    def accuracy(self, x: Array, name: str) -> float:
        target = self.classes.index(name)
        return float(np.mean(self.classify(x) == target))


def train_classifier(
    theta: DenoiserParams,
    concepts: ConceptSet,
    schedule: NoiseSchedule,
    n_per_concept: int = 250,
    seed: int = 0,
    min_accuracy: float = 0.95,
) -> ToyClassifier:
    """Fit centroids on fresh samples from the original model.

    A held-out batch per class must classify with accuracy >= min_accuracy;
    below that, ACC deltas on edited models would not be meaningful.
    """
    if n_per_concept < 1:
        raise ValueError("n_per_concept must be positive")
    classes = (*concepts.names, BLANK)
    centroids, hits, total = [], 0, 0
    for name in classes:
        emb = concepts.get(name)
        xs = sample(theta, emb, schedule, n_per_concept,
                    _stream_seed(seed, "classifier-fit", name))
        centroids.append(xs.mean(axis=0))
    cents = np.stack(centroids)
    cents.flags.writeable = False
    clf = ToyClassifier(classes=classes, centroids=cents, holdout_accuracy=0.0,
                        n_train=n_per_concept, seed=seed)
    for i, name in enumerate(classes):
        emb = concepts.get(name)
        xs = sample(theta, emb, schedule, n_per_concept,
                    _stream_seed(seed, "classifier-holdout", name))
        hits += int(np.sum(clf.classify(xs) == i))
        total += n_per_concept
    holdout = hits / total
    if holdout < min_accuracy:
        raise ValueError(
            f"classifier holdout accuracy {holdout:.3f} below {min_accuracy}; "
            "the generative model does not separate the concepts well enough"
        )
    return replace(clf, holdout_accuracy=holdout)


# ---------------------------------------------------------------------------
# per-model evaluation


@dataclass(frozen=True)
class ConceptEval:
    name: str
    acc_before: float
    acc_after: float
    distance: float  # mean l2 between same-seed samples of both models
    corr: float      # signature correlation, original vs edited, probe batch


@dataclass(frozen=True)
class EvalReport:
    rows: tuple[ConceptEval, ...]
    delta_norm: float
    n_per_concept: int
    seed: int

    def row(self, name: str) -> ConceptEval:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)


def edited_delta_norm(theta_edited: DenoiserParams, theta_dm: DenoiserParams) -> float:
    """Mean l1 norm over the layers that actually changed; 0 for no edit."""
    deltas = {}
    for name, arr in theta_dm.values.items():
        d = theta_edited.values[name] - arr
        if np.any(d != 0.0):
            deltas[name] = d
    return delta_norm(deltas) if deltas else 0.0


def evaluate(
    theta_edited: DenoiserParams,
    theta_dm: DenoiserParams,
    concepts: ConceptSet,
    schedule: NoiseSchedule,
    classifier: ToyClassifier,
    n_per_concept: int = 250,
    seed: int = 0,
) -> EvalReport:
    """Per-concept ACC before/after, same-seed distance proxy, and the
    post-hoc signature correlation under the edited model."""
    if classifier is None:
        raise ValueError("evaluate needs a trained classifier")
    if n_per_concept < 1:
        raise ValueError("n_per_concept must be positive")
    blank = concepts.blank
    rows = []
    for name in concepts.names:
        emb = concepts.get(name)
        s = _stream_seed(seed, "eval-sample", name)
        xs_before = sample(theta_dm, emb, schedule, n_per_concept, s)
        xs_after = sample(theta_edited, emb, schedule, n_per_concept, s)
        acc_before = classifier.accuracy(xs_before, name)
        acc_after = classifier.accuracy(xs_after, name)
        distance = float(np.mean(np.linalg.norm(xs_after - xs_before, axis=1)))

        g = child_rng(seed, "eval-corr", name)
        k = min(_CORR_PROBES, n_per_concept)
        x0 = xs_before[:k]
        t = g.integers(1, schedule.timesteps + 1, size=k)
        eps = g.standard_normal(x0.shape)
        x_t = forward_diffuse(x0, t, eps, schedule)
        d_ori = delta_eps(theta_dm, x_t, emb, blank, t)
        d_new = delta_eps(theta_edited, x_t, emb, blank, t)
        corr = corr_value(d_ori, d_new)
        row = ConceptEval(name, acc_before, acc_after, distance, corr)
        if not all(np.isfinite(v) for v in
                   (acc_before, acc_after, distance, corr)):
            raise NumericalError(f"non-finite evaluation fields for {name!r}")
        rows.append(row)
    return EvalReport(rows=tuple(rows),
                      delta_norm=edited_delta_norm(theta_edited, theta_dm),
                      n_per_concept=n_per_concept, seed=seed)


def write_eval_csv(path, report: EvalReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["concept", "acc_before", "acc_after", "distance",
                         "corr", "delta_norm"])
        for r in report.rows:
            writer.writerow([r.name, repr(r.acc_before), repr(r.acc_after),
                             repr(r.distance), repr(r.corr),
                             repr(report.delta_norm)])


# ---------------------------------------------------------------------------
# tau ablation


@dataclass(frozen=True)
class AblationRow:
    tau: float
    iters_run: int  # summed over the per-concept runs of one sweep point
    delta_norm: float
    erased_acc: float     # mean ACC-after over erased concepts
    preserved_acc: float  # mean ACC-after over the held-out concepts


def ablate_tau(
    taus: Sequence[float],
    theta: DenoiserParams,
    forgotten: Sequence[str],
    data: ToyDataset,
    concepts: ConceptSet,
    schedule: NoiseSchedule,
    hyper: EraseHyper,
    classifier: ToyClassifier,
    n_per_concept: int = 250,
    eval_seed: int = 0,
    mode: str = "separate",
) -> list[AblationRow]:
    """One full erase + evaluate per threshold, same seed throughout."""
    rows = []
    held_out = [n for n in concepts.names if n not in forgotten]
    for tau in taus:
        run = replace(hyper, tau=float(tau), tau_overrides={})
        eraser, reports = train_sepme(theta, forgotten, data, concepts, schedule,
                                      run, mode=mode)
        edited = eraser.apply(forgotten)
        report = evaluate(edited, theta, concepts, schedule, classifier,
                          n_per_concept, eval_seed)
        erased = float(np.mean([report.row(n).acc_after for n in forgotten]))
        preserved = (float(np.mean([report.row(n).acc_after for n in held_out]))
                     if held_out else float("nan"))
        rows.append(AblationRow(
            tau=float(tau),
            iters_run=sum(r.iters_run for r in reports),
            delta_norm=edited_delta_norm(edited, theta),
            erased_acc=erased,
            preserved_acc=preserved,
        ))
    return rows


def write_ablation_csv(path, rows: Sequence[AblationRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tau", "iters_run", "delta_norm", "erased_acc",
                         "preserved_acc"])
        for r in rows:
            writer.writerow([repr(r.tau), r.iters_run, repr(r.delta_norm),
                             repr(r.erased_acc), repr(r.preserved_acc)])


# ---------------------------------------------------------------------------
# subset separability


@dataclass(frozen=True)
class SuiteCell:
    subset: tuple[str, ...]
    concept: str
    check: str   # "erased_corr" | "preserved_dev" | "blank_dev"
    value: float
    bound: float
    ok: bool
    note: str = ""


@dataclass(frozen=True)
class SuiteResult:
    cells: tuple[SuiteCell, ...]

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.cells)

    def failures(self) -> list[SuiteCell]:
        return [c for c in self.cells if not c.ok]


def separability_suite(
    eraser: EraserSet,
    concepts: ConceptSet,
    schedule: NoiseSchedule,
    probes: int = 100,
    taus: Mapping[str, float] | None = None,
    seed: int = 0,
) -> SuiteResult:
    """Check every subset of increments: erased members must show signature
    correlation at or below their stop threshold, everyone else (and blank)
    must be untouched. Failures are recorded, never raised."""
    names = eraser.concepts
    if len(names) > 5:
        raise ValueError("exhaustive subset sweep is limited to 5 concepts")
    if probes < 1:
        raise ValueError("probes must be positive")
    taus = dict(taus or {})
    g = child_rng(seed, "suite-probes")
    # spread matches the data radius so probes cover the sampled region
    x_t = g.standard_normal((probes, eraser.base.dims.data_dim)) * 2.0
    t = g.integers(1, schedule.timesteps + 1, size=probes)
    blank = concepts.blank
    cells = []
    for mask in range(2 ** len(names)):
        subset = tuple(n for i, n in enumerate(names) if mask >> i & 1)
        edited = eraser.apply(subset)
        for j in names:
            if j in subset:
                emb = concepts.get(j)
                d_ori = delta_eps(eraser.base, x_t, emb, blank, t)
                d_new = delta_eps(edited, x_t, emb, blank, t)
                val = corr_value(d_ori, d_new)
                bound = float(taus.get(j, 0.0))
                cells.append(SuiteCell(subset, j, "erased_corr", val, bound,
                                       ok=val <= bound))
            else:
                cells.append(_preservation_cell(eraser, subset, concepts.get(j),
                                                "preserved_dev", x_t, t))
        cells.append(_preservation_cell(eraser, subset, blank, "blank_dev", x_t, t))
    return SuiteResult(cells=tuple(cells))


def _preservation_cell(eraser, subset, emb, check, x_t, t) -> SuiteCell:
    try:
        val = restoration_check(eraser, subset, emb, x_t, t)
    except ValueError as e:
        return SuiteCell(subset, emb.name, check, float("nan"), 1e-9,
                         ok=False, note=str(e))
    return SuiteCell(subset, emb.name, check, val, 1e-9, ok=val <= 1e-9)


def write_subsets_csv(path, result: SuiteResult) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subset", "concept", "check", "value", "bound", "ok",
                         "note"])
        for c in result.cells:
            writer.writerow(["+".join(c.subset), c.concept, c.check,
                             repr(c.value), repr(c.bound), int(c.ok), c.note])
