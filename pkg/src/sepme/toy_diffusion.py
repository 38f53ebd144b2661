"""Miniature conditional DDPM over 2-D points.

The denoiser is a small residual network conditioned on a concept through
cross-attention: queries come from the hidden state, keys and values from the
concept's token matrix. Only the key/value projections see concept tokens
directly, which is what makes targeted weight surgery on them meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

import numpy as np

from . import numerics as nm
from .numerics import Array, NumericalError, Var

BLANK = "blank"


# ---------------------------------------------------------------------------
# noise schedule


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule with cumulative signal levels.

    betas and alpha_bar have length timesteps + 1; index 0 is the identity
    step (beta 0, alpha_bar 1) so that t indexes directly.
    """

    timesteps: int
    betas: Array
    alpha_bar: Array


def make_schedule(timesteps: int, beta_min: float = 1e-4, beta_max: float = 0.1) -> NoiseSchedule:
    if timesteps < 2:
        raise ValueError("need at least two timesteps")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError("betas must satisfy 0 < beta_min <= beta_max < 1")
    betas = np.concatenate([[0.0], np.linspace(beta_min, beta_max, timesteps)])
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas[1:])])
    betas.flags.writeable = False
    alpha_bar.flags.writeable = False
    return NoiseSchedule(timesteps, betas, alpha_bar)


def forward_diffuse(x0: Array, t, eps: Array, schedule: NoiseSchedule) -> Array:
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError("x0 and eps must have matching shapes")
    t_arr = np.asarray(t, dtype=np.int64)
    if np.any(t_arr < 0) or np.any(t_arr > schedule.timesteps):
        raise ValueError("t out of range")
    ab = schedule.alpha_bar[t_arr]
    if x0.ndim == 2:
        ab = ab.reshape(-1, 1) if t_arr.ndim == 1 else ab
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# concepts


@dataclass(frozen=True)
class ConceptEmbedding:
    """Frozen token matrix standing in for a text encoder's output."""

    name: str
    tokens: Array  # (token_count, token_dim), read-only


class ConceptSet:
    """Registry of concept embeddings; the blank concept is always present."""

    def __init__(self, embeddings: Mapping[str, ConceptEmbedding]):
        if BLANK not in embeddings:
            raise ValueError("concept set must define the blank concept")
        self._emb = dict(embeddings)

    @property
    def blank(self) -> ConceptEmbedding:
        return self._emb[BLANK]

    @property
    def names(self) -> list[str]:
        return [n for n in self._emb if n != BLANK]

    def get(self, name: str) -> ConceptEmbedding:
        if name not in self._emb:
            raise KeyError(f"unknown concept {name!r}")
        return self._emb[name]

    def __contains__(self, name: str) -> bool:
        return name in self._emb


def build_concepts(
    names: Iterable[str],
    token_count: int,
    token_dim: int,
    seed: int,
    scale: float = 3.0,
) -> ConceptSet:
    """Seeded pseudo-random token matrices, one per concept plus blank."""
    emb = {}
    for name in [BLANK, *names]:
        if name in emb:
            raise ValueError(f"duplicate concept name {name!r}")
        tokens = nm.child_rng(seed, "concept-tokens", name).standard_normal(
            (token_count, token_dim)
        ) * scale
        tokens.flags.writeable = False
        emb[name] = ConceptEmbedding(name, tokens)
    return ConceptSet(emb)


# ---------------------------------------------------------------------------
# denoiser parameters


@dataclass(frozen=True)
class ModelDims:
    data_dim: int = 2
    hidden_dim: int = 32
    token_dim: int = 64
    token_count: int = 4
    attn_dim: int = 32
    ffn_dim: int = 64
    blocks: int = 2

    def __post_init__(self):
        if self.attn_dim != self.hidden_dim:
            raise ValueError("attn_dim must equal hidden_dim (residual attention)")
        if min(self.data_dim, self.hidden_dim, self.token_dim, self.token_count,
               self.ffn_dim, self.blocks) < 1:
            raise ValueError("all dimensions must be positive")


def kv_layer_names(dims: ModelDims) -> list[str]:
    out = []
    for b in range(dims.blocks):
        out += [f"block{b}.to_k", f"block{b}.to_v"]
    return out


def cross_attention_layer_names(dims: ModelDims) -> list[str]:
    out = []
    for b in range(dims.blocks):
        out += [f"block{b}.to_q", f"block{b}.to_k", f"block{b}.to_v"]
    return out


@dataclass(frozen=True)
class DenoiserParams:
    """Immutable snapshot of all named denoiser layers."""

    dims: ModelDims
    timesteps: int
    values: dict[str, Array] = field(repr=False)

    def layer_names(self) -> list[str]:
        return list(self.values)

    def copy_values(self) -> dict[str, Array]:
        return {k: v.copy() for k, v in self.values.items()}

    def with_values(self, values: Mapping[str, Array]) -> "DenoiserParams":
        return freeze_params(self.dims, self.timesteps, values)


def freeze_params(dims: ModelDims, timesteps: int, values: Mapping[str, Array]) -> DenoiserParams:
    frozen = {}
    for k, v in values.items():
        arr = np.asarray(v, dtype=np.float64).copy()
        arr.flags.writeable = False
        frozen[k] = arr
    return DenoiserParams(dims=dims, timesteps=timesteps, values=frozen)


def init_denoiser(dims: ModelDims, timesteps: int, seed: int) -> DenoiserParams:
    rng = nm.child_rng(seed, "denoiser-init")

    def w(rows, cols):
        return rng.standard_normal((rows, cols)) / math.sqrt(rows)

    values = {
        "input.w": w(dims.data_dim, dims.hidden_dim),
        "input.b": np.zeros(dims.hidden_dim),
        "time_emb": rng.standard_normal((timesteps + 1, dims.hidden_dim)) * 0.5,
    }
    for b in range(dims.blocks):
        values[f"block{b}.to_q"] = w(dims.hidden_dim, dims.attn_dim)
        values[f"block{b}.to_k"] = w(dims.token_dim, dims.attn_dim)
        values[f"block{b}.to_v"] = w(dims.token_dim, dims.attn_dim)
        values[f"block{b}.ffn.w1"] = w(dims.hidden_dim, dims.ffn_dim)
        values[f"block{b}.ffn.b1"] = np.zeros(dims.ffn_dim)
        values[f"block{b}.ffn.w2"] = w(dims.ffn_dim, dims.hidden_dim)
        values[f"block{b}.ffn.b2"] = np.zeros(dims.hidden_dim)
    values["output.w"] = w(dims.hidden_dim, dims.data_dim)
    values["output.b"] = np.zeros(dims.data_dim)
    return freeze_params(dims, timesteps, values)


# ---------------------------------------------------------------------------
# forward passes
#
# One forward definition drives two engines: plain numpy (sampling, frozen
# reference passes) and the tape (training). Both call the same primitive
# sequences, so their outputs agree bitwise.


class _NumpyOps:
    matmul = staticmethod(lambda a, b: a @ b)
    transpose = staticmethod(lambda a: a.T)
    add = staticmethod(lambda a, b: a + b)
    scale = staticmethod(lambda a, s: a * s)
    tanh = staticmethod(np.tanh)
    softmax_rows = staticmethod(nm.softmax_rows_raw)
    take_rows = staticmethod(lambda table, idx: table[idx])


class _TapeOps:
    matmul = staticmethod(nm.matmul)
    transpose = staticmethod(nm.transpose)
    add = staticmethod(nm.add)
    scale = staticmethod(nm.scale)
    tanh = staticmethod(nm.tanh)
    softmax_rows = staticmethod(nm.softmax_rows)
    take_rows = staticmethod(nm.take_rows)


def _forward(p, dims: ModelDims, x, tokens, t_idx, ops, collect_attn: bool = False):
    """Shared denoiser body. p maps layer name to ndarray or Var."""
    inv_sqrt_d = 1.0 / math.sqrt(dims.attn_dim)
    h = ops.add(ops.matmul(x, p["input.w"]), p["input.b"])
    h = ops.add(h, ops.take_rows(p["time_emb"], t_idx))
    attns = []
    for b in range(dims.blocks):
        pre = f"block{b}."
        k = ops.matmul(tokens, p[pre + "to_k"])
        v = ops.matmul(tokens, p[pre + "to_v"])
        q = ops.matmul(h, p[pre + "to_q"])
        attn = ops.softmax_rows(ops.scale(ops.matmul(q, ops.transpose(k)), inv_sqrt_d))
        if collect_attn:
            attns.append(attn)
        h = ops.add(h, ops.matmul(attn, v))
        f = ops.tanh(ops.add(ops.matmul(h, p[pre + "ffn.w1"]), p[pre + "ffn.b1"]))
        h = ops.add(h, ops.add(ops.matmul(f, p[pre + "ffn.w2"]), p[pre + "ffn.b2"]))
    out = ops.add(ops.matmul(h, p["output.w"]), p["output.b"])
    return (out, attns) if collect_attn else out


def forward_batch(theta: DenoiserParams, x_t: Array, tokens: Array, t) -> Array:
    """Plain-numpy batched prediction; x_t is (B, data_dim)."""
    t_idx = np.asarray(t, dtype=np.int64)
    if t_idx.ndim == 0:
        t_idx = np.full(x_t.shape[0], int(t_idx), dtype=np.int64)
    return _forward(theta.values, theta.dims, x_t, tokens, t_idx, _NumpyOps)


def forward_tape(handles, dims: ModelDims, x_t: Array, tokens: Array, t, collect_attn=False):
    """Tape-engine prediction; handles maps layer names to Vars."""
    t_idx = np.asarray(t, dtype=np.int64)
    if t_idx.ndim == 0:
        t_idx = np.full(x_t.shape[0], int(t_idx), dtype=np.int64)
    return _forward(handles, dims, nm.const(x_t), nm.const(tokens), t_idx, _TapeOps,
                    collect_attn=collect_attn)


def denoise_predict(theta: DenoiserParams, x_t: Array, c: ConceptEmbedding, t) -> Array:
    """Predict the noise in x_t at step t under concept c."""
    x = np.asarray(x_t, dtype=np.float64)
    if c.tokens.shape[1] != theta.dims.token_dim:
        raise ValueError("concept token width does not match the model")
    t_arr = np.asarray(t, dtype=np.int64)
    if np.any(t_arr < 0) or np.any(t_arr > theta.timesteps):
        raise ValueError("t out of range")
    single = x.ndim == 1
    if single:
        x = x.reshape(1, -1)
    if x.shape[1] != theta.dims.data_dim:
        raise ValueError("x_t width does not match the model")
    out = forward_batch(theta, x, c.tokens, t_arr)
    return out[0] if single else out


def dm_loss_node(leaves, dims: ModelDims, x_t: Array, tokens: Array, t_idx, eps: Array) -> Var:
    """Squared-error noise prediction loss, mean over the batch."""
    pred = forward_tape(leaves, dims, x_t, tokens, t_idx)
    return nm.scale(nm.sum_all(nm.square(nm.sub(pred, nm.const(eps)))), 1.0 / x_t.shape[0])


# ---------------------------------------------------------------------------
# data


@dataclass(frozen=True)
class ToyDataset:
    """Gaussian mixture with one isotropic mode per concept."""

    centers: dict[str, Array]
    sigma: float

    def sample(self, name: str, n: int, rng: np.random.Generator) -> Array:
        if name not in self.centers:
            raise KeyError(f"no data mode for concept {name!r}")
        c = self.centers[name]
        return c + self.sigma * rng.standard_normal((n, c.shape[0]))


def make_default_dataset(names: Iterable[str], radius: float = 2.0, sigma: float = 0.25) -> ToyDataset:
    """Concept modes on a circle, blank at the origin."""
    names = list(names)
    centers = {BLANK: np.zeros(2)}
    for i, name in enumerate(names):
        ang = 2.0 * math.pi * i / max(len(names), 1)
        centers[name] = np.array([radius * math.cos(ang), radius * math.sin(ang)])
    return ToyDataset(centers=centers, sigma=sigma)


# ---------------------------------------------------------------------------
# training


class Adam:
    """Adam with bias correction (b1 0.9, b2 0.999, eps 1e-8)."""

    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.b1, self.b2, self.eps = b1, b2, eps
        self.t = 0
        self.m: dict[str, Array] = {}
        self.v: dict[str, Array] = {}

    def step(self, params: dict[str, Array], grads: Mapping[str, Array]) -> None:
        self.t += 1
        for name, p in params.items():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m += (1.0 - self.b1) * (g - m)
            v += (1.0 - self.b2) * (g * g - v)
            mh = m / (1.0 - self.b1 ** self.t)
            vh = v / (1.0 - self.b2 ** self.t)
            p -= self.lr * mh / (np.sqrt(vh) + self.eps)


@dataclass(frozen=True)
class DmHyper:
    lr: float = 2e-3
    steps: int = 6000
    batch: int = 32
    seed: int = 0


def train_dm(
    dataset: ToyDataset,
    concepts: ConceptSet,
    schedule: NoiseSchedule,
    dims: ModelDims,
    hyper: DmHyper,
) -> tuple[DenoiserParams, list[float]]:
    """Train the denoiser on noise prediction; returns (theta, loss trace)."""
    if hyper.steps < 0 or hyper.batch < 1:
        raise ValueError("bad training hyperparameters")
    theta0 = init_denoiser(dims, schedule.timesteps, hyper.seed)
    params = theta0.copy_values()
    adam = Adam(hyper.lr)
    rng = nm.child_rng(hyper.seed, "train-dm")
    names = [BLANK, *concepts.names]
    missing = [n for n in names if n not in dataset.centers]
    if missing:
        raise ValueError(f"dataset lacks modes for {missing}")
    trace = []
    for step_i in range(hyper.steps):
        cname = names[step_i % len(names)]
        x0 = dataset.sample(cname, hyper.batch, rng)
        t_idx = rng.integers(1, schedule.timesteps + 1, size=hyper.batch)
        eps = rng.standard_normal((hyper.batch, dims.data_dim))
        x_t = forward_diffuse(x0, t_idx, eps, schedule)
        leaves = {k: Var(v) for k, v in params.items()}
        loss = dm_loss_node(leaves, dims, x_t, concepts.get(cname).tokens, t_idx, eps)
        val = float(loss.value)
        if not np.isfinite(val):
            raise NumericalError(f"non-finite training loss at step {step_i}")
        trace.append(val)
        adam.step(params, nm.grads(loss, leaves))
    return freeze_params(dims, schedule.timesteps, params), trace


# ---------------------------------------------------------------------------
# sampling


def sample(
    theta: DenoiserParams,
    c: ConceptEmbedding,
    schedule: NoiseSchedule,
    n: int,
    seed: int,
) -> Array:
    """Ancestral DDPM sampling; same seed gives bitwise-identical samples."""
    if n < 0:
        raise ValueError("n must be non-negative")
    d = theta.dims.data_dim
    if n == 0:
        return np.zeros((0, d))
    g = nm.make_rng(seed)
    x = g.standard_normal((n, d))
    for t in range(schedule.timesteps, 0, -1):
        eps_hat = forward_batch(theta, x, c.tokens, t)
        beta_t = schedule.betas[t]
        ab_t = schedule.alpha_bar[t]
        mean = (x - beta_t / np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(1.0 - beta_t)
        if t > 1:
            var = beta_t * (1.0 - schedule.alpha_bar[t - 1]) / (1.0 - ab_t)
            x = mean + np.sqrt(var) * g.standard_normal((n, d))
        else:
            x = mean
    return x
