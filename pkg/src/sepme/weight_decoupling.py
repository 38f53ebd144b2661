"""Null-space weight increments and the erase/restore algebra.

Each erased concept gets its own additive increment on the key/value
projections. The increment lives in the null space of a constraint matrix
stacking the blank tokens and every other concept to keep, so applying it
cannot move those concepts' keys or values. Increments of different concepts
therefore compose and cancel independently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import numerics as nm
from .numerics import Array
from .toy_diffusion import BLANK, ConceptEmbedding, DenoiserParams, denoise_predict

RANK_TOL = 1e-10


@dataclass(frozen=True)
class ConstraintSystem:
    """Null-space basis protecting every stacked token row."""

    erased: str
    preserved: tuple[str, ...]  # concept names whose tokens are in the stack
    matrix: Array               # (rows, token_dim) stacked token matrices
    null_basis: Array           # (token_dim, token_dim - rank), unit columns
    rank: int


def build_constraint(
    embeddings: Sequence[ConceptEmbedding],
    erased_index: int,
    blank: ConceptEmbedding,
    rank_tol: float = RANK_TOL,
) -> ConstraintSystem:
    """Stack blank plus every other concept's tokens and take the null space.

    embeddings is the ordered list of concepts being erased overall;
    erased_index selects which one this increment is for (0-based).
    """
    if not 0 <= erased_index < len(embeddings):
        raise IndexError("erased_index out of range")
    keep = [e for i, e in enumerate(embeddings) if i != erased_index]
    rows = [blank.tokens, *[e.tokens for e in keep]]
    matrix = np.vstack(rows)
    basis, rank = nm.nullspace(matrix, rank_tol=rank_tol)
    matrix = matrix.copy()
    matrix.flags.writeable = False
    basis.flags.writeable = False
    return ConstraintSystem(
        erased=embeddings[erased_index].name,
        preserved=tuple(e.name for e in keep),
        matrix=matrix,
        null_basis=basis,
        rank=rank,
    )


# ---------------------------------------------------------------------------
# increments


def realize_dense(coeffs: Array, null_basis: Array, scale: float) -> Array:
    """Dense layer increment from combination coefficients.

    coeffs is (attn_dim, free_dims); the increment is the transpose of
    coeffs times the scaled basis, shaped (token_dim, attn_dim), so every
    column lies in the span of the basis.
    """
    return (coeffs @ (scale * null_basis.T)).T


@dataclass(frozen=True)
class WeightIncrement:
    """Additive increment for one erased concept.

    kind 'decoupled' stores combination coefficients over a null-space basis
    per layer; kind 'dense' stores raw per-layer deltas (used by the broad
    fine-tuning path, which protects nothing exactly).
    """

    concept: str
    kind: str
    layers: dict[str, Array] = field(repr=False)   # coeffs or dense deltas
    preserved: tuple[str, ...] = ()
    null_basis: Array | None = None
    scale: float = 0.0

    def __post_init__(self):
        if self.kind not in ("decoupled", "dense"):
            raise ValueError(f"unknown increment kind {self.kind!r}")
        if self.kind == "decoupled" and self.null_basis is None:
            raise ValueError("decoupled increments need a null-space basis")
        object.__setattr__(self, "_realized", {})

    def realize(self, layer: str) -> Array:
        """Dense delta for one layer; computed once and cached."""
        cache = self._realized
        if layer not in cache:
            if layer not in self.layers:
                raise KeyError(f"increment for {self.concept!r} has no layer {layer!r}")
            if self.kind == "dense":
                dense = self.layers[layer].copy()
            else:
                dense = realize_dense(self.layers[layer], self.null_basis, self.scale)
            dense.flags.writeable = False
            cache[layer] = dense
        return cache[layer]

    def layer_names(self) -> list[str]:
        return list(self.layers)


def zero_increment(
    concept: str,
    system: ConstraintSystem,
    layer_names: Iterable[str],
    attn_dim: int,
    scale: float,
) -> WeightIncrement:
    free = system.null_basis.shape[1]
    return WeightIncrement(
        concept=concept,
        kind="decoupled",
        layers={name: np.zeros((attn_dim, free)) for name in layer_names},
        preserved=(*system.preserved,),
        null_basis=system.null_basis,
        scale=scale,
    )


# ---------------------------------------------------------------------------
# composition


class EraserSet:
    """Base parameters plus named increments, composable per subset.

    Increments are applied in their insertion order regardless of the order
    a subset is written in, so equal subsets give bitwise-equal parameters.
    """

    def __init__(self, base: DenoiserParams):
        self.base = base
        self._inc: dict[str, WeightIncrement] = {}

    def add(self, inc: WeightIncrement) -> None:
        if inc.concept in self._inc:
            raise ValueError(f"increment for {inc.concept!r} already present")
        for name, arr in inc.layers.items():
            if name not in self.base.values:
                raise KeyError(f"increment targets unknown layer {name!r}")
            if inc.kind == "dense" and arr.shape != self.base.values[name].shape:
                raise ValueError(f"dense increment shape mismatch on {name!r}")
        self._inc[inc.concept] = inc

    @property
    def concepts(self) -> list[str]:
        return list(self._inc)

    def increment(self, concept: str) -> WeightIncrement:
        return self._inc[concept]

    def apply(self, subset: Iterable[str]) -> DenoiserParams:
        """theta_dm plus the sum of the chosen realized increments."""
        chosen = list(subset)
        if len(set(chosen)) != len(chosen):
            raise ValueError("subset must not repeat concepts")
        unknown = [c for c in chosen if c not in self._inc]
        if unknown:
            raise KeyError(f"no increment for {unknown}")
        values = self.base.copy_values()
        for name in self._inc:  # canonical order, not subset order
            if name not in chosen:
                continue
            inc = self._inc[name]
            for layer in inc.layer_names():
                values[layer] = values[layer] + inc.realize(layer)
        return self.base.with_values(values)


def restoration_check(
    eraser: EraserSet,
    erased_subset: Iterable[str],
    probe: ConceptEmbedding,
    x_t: Array,
    t,
) -> float:
    """Max absolute prediction deviation for a protected probe concept.

    The probe must be covered by the constraint stack of every applied
    increment (or be the blank concept) for the guarantee to be exact.
    """
    subset = list(erased_subset)
    for name in subset:
        inc = eraser.increment(name)
        if inc.kind != "decoupled":
            raise ValueError(f"increment for {name!r} protects nothing exactly")
        if probe.name != BLANK and probe.name not in inc.preserved:
            raise ValueError(
                f"probe {probe.name!r} is not covered by the constraints of {name!r}"
            )
    edited = eraser.apply(subset)
    before = denoise_predict(eraser.base, x_t, probe, t)
    after = denoise_predict(edited, x_t, probe, t)
    return float(np.max(np.abs(after - before))) if before.size else 0.0


def delta_norm(deltas: Mapping[str, Array], mode: str = "l1_mean") -> float:
    """Increment size: total L1 over edited layers divided by layer count,
    or the global L2 norm."""
    if not deltas:
        return 0.0
    if mode == "l1_mean":
        total = sum(float(np.sum(np.abs(d))) for d in deltas.values())
        return total / len(deltas)
    if mode == "l2":
        total = sum(float(np.sum(d * d)) for d in deltas.values())
        return float(np.sqrt(total))
    raise ValueError(f"unknown norm mode {mode!r}")
