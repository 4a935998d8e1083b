"""Body-part cross-attention transformer used as the label-free long-term memory.

Forward path for a window ``x`` of shape ``[l, d]`` (batched as ``[B, l, d]``):
partition channels into body parts, embed every part linearly and add a
sinusoidal position code, attend from the query part to every part (one
multi-head branch per part), average the branches, run three
``LayerNorm(u + Dropout(FF(u)))`` blocks and mean-pool over time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import DEFAULT_DTYPE, Tensor
from .modules import Module, glorot


@dataclass(frozen=True)
class BodyPartition:
    groups: tuple[tuple[int, ...], ...]
    query: int = 0
    names: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.groups:
            raise ValueError("a partition needs at least one group")
        flat = [c for g in self.groups for c in g]
        if len(flat) != len(set(flat)):
            raise ValueError("body-part groups overlap")
        if any(len(g) == 0 for g in self.groups):
            raise ValueError("empty body-part group")
        if not 0 <= self.query < len(self.groups):
            raise ValueError(f"query index {self.query} out of range for {len(self.groups)} groups")

    @property
    def n_parts(self) -> int:
        return len(self.groups)

    @property
    def n_channels(self) -> int:
        return sum(len(g) for g in self.groups)

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(len(g) for g in self.groups)

    @classmethod
    def from_names(cls, channel_names: Sequence[str], body_parts: dict[str, list[str]], query_part: str):
        pos = {name: i for i, name in enumerate(channel_names)}
        groups = tuple(tuple(pos[c] for c in chans) for chans in body_parts.values())
        names = tuple(body_parts)
        return cls(groups, names.index(query_part), names)

    @classmethod
    def contiguous(cls, widths: Sequence[int], query: int = 0):
        groups, start = [], 0
        for w in widths:
            groups.append(tuple(range(start, start + w)))
            start += w
        return cls(tuple(groups), query)


def partition(x: np.ndarray, p: BodyPartition) -> list[np.ndarray]:
    """Split the channel axis (last) of ``x`` into the partition's groups."""
    d = x.shape[-1]
    covered = sorted(c for g in p.groups for c in g)
    if covered != list(range(d)):
        raise ValueError(f"partition covers channels {covered}, input has {d}")
    return [x[..., list(g)] for g in p.groups]


def positional_encoding(length: int, d_model: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Sinusoidal code: even columns ``sin(pos / 10000^(2i/d))``, odd columns ``cos``."""
    pos = np.arange(length)[:, None]
    i = np.arange(0, d_model, 2)[None, :]
    angle = pos / np.power(10000.0, i / d_model)
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe.astype(dtype)


def embed_part(x_i, weight, bias, pe: np.ndarray) -> Tensor:
    """``x_i @ weight + bias + pe`` for ``x_i`` of shape ``[..., l, d_i]``."""
    return ag.matmul(ag.as_tensor(x_i), weight) + bias + Tensor(pe)


def cross_attention_branch(z_q, z_i, w_q, w_k, w_v, w_h, *, return_weights: bool = False):
    """Multi-head attention from ``z_q`` onto ``z_i``.

    ``w_q``, ``w_k``, ``w_v`` are ``[m_H, d_model, d_model]``; ``w_h`` is
    ``[m_H * d_model, d_model]``. Scores are scaled by ``1/sqrt(d_model)``.
    """
    z_q, z_i = ag.as_tensor(z_q), ag.as_tensor(z_i)
    *lead, length, d_model = z_q.shape
    heads = w_q.shape[0]
    zq = ag.reshape(z_q, (*lead, 1, length, d_model))
    zi = ag.reshape(z_i, (*lead, 1, z_i.shape[-2], d_model))
    q = ag.matmul(zq, w_q)
    k = ag.matmul(zi, w_k)
    v = ag.matmul(zi, w_v)
    scores = ag.matmul(q, ag.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(d_model))
    weights = ag.softmax(scores, axis=-1)
    h = ag.matmul(weights, v)  # [..., m_H, l, d_model]
    h = ag.reshape(ag.swapaxes(h, -3, -2), (*lead, length, heads * d_model))
    out = ag.matmul(h, w_h)
    return (out, weights.data) if return_weights else out


def aggregate(branches: Sequence) -> Tensor:
    """Elementwise mean over branches."""
    if not branches:
        raise ValueError("aggregate needs at least one branch")
    if len(branches) == 1:
        return ag.as_tensor(branches[0])
    total = branches[0]
    for b in branches[1:]:
        total = total + b
    return total * (1.0 / len(branches))


@dataclass(frozen=True)
class TransformerConfig:
    d_model: int = 64
    heads: int = 4
    dropout: float = 0.1
    ff_hidden: int | None = None
    n_blocks: int = 3
    attention: str = "cross"
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.attention not in ("cross", "self"):
            raise ValueError(f"attention must be 'cross' or 'self', got {self.attention!r}")
        if self.d_model < 1 or self.heads < 1:
            raise ValueError("d_model and heads must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def hidden(self) -> int:
        return self.ff_hidden or 2 * self.d_model


class CrossAttentionTransformer(Module):
    def __init__(self, part: BodyPartition, cfg: TransformerConfig, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.partition = part
        self.cfg = cfg
        self.dtype = dtype
        D, m, H = cfg.d_model, cfg.heads, cfg.hidden
        for i, width in enumerate(part.widths):
            self.add_param(f"embed.{i}.weight", glorot(rng, (width, D), width, D, dtype))
            self.add_param(f"embed.{i}.bias", np.zeros(D, dtype))
        for i in range(part.n_parts):
            for name in ("w_q", "w_k", "w_v"):
                self.add_param(f"branch.{i}.{name}", glorot(rng, (m, D, D), D, D, dtype))
            self.add_param(f"branch.{i}.w_h", glorot(rng, (m * D, D), m * D, D, dtype))
        for k in range(cfg.n_blocks):
            self.add_param(f"ff.{k}.w1", glorot(rng, (D, H), D, H, dtype))
            self.add_param(f"ff.{k}.b1", np.zeros(H, dtype))
            self.add_param(f"ff.{k}.w2", glorot(rng, (H, D), H, D, dtype))
            self.add_param(f"ff.{k}.b2", np.zeros(D, dtype))
            self.add_param(f"norm.{k}.gain", np.ones(D, dtype))
            self.add_param(f"norm.{k}.bias", np.zeros(D, dtype))
        self._pe_cache: dict[int, np.ndarray] = {}

    @property
    def d_model(self) -> int:
        return self.cfg.d_model

    def _pe(self, length: int) -> np.ndarray:
        if length not in self._pe_cache:
            self._pe_cache[length] = positional_encoding(length, self.cfg.d_model, self.dtype)
        return self._pe_cache[length]

    def embed(self, x: np.ndarray) -> list[Tensor]:
        p = self.params
        pe = self._pe(x.shape[-2])
        return [
            embed_part(part.astype(self.dtype, copy=False), p[f"embed.{i}.weight"], p[f"embed.{i}.bias"], pe)
            for i, part in enumerate(partition(x, self.partition))
        ]

    def branch(self, i: int, z_q, z_i, return_weights: bool = False):
        p = self.params
        return cross_attention_branch(
            z_q,
            z_i,
            p[f"branch.{i}.w_q"],
            p[f"branch.{i}.w_k"],
            p[f"branch.{i}.w_v"],
            p[f"branch.{i}.w_h"],
            return_weights=return_weights,
        )

    def attend(self, z: list[Tensor], return_weights: bool = False):
        q = self.partition.query
        outs, weights = [], []
        for i, z_i in enumerate(z):
            query = z[q] if self.cfg.attention == "cross" else z_i
            res = self.branch(i, query, z_i, return_weights)
            if return_weights:
                outs.append(res[0])
                weights.append(res[1])
            else:
                outs.append(res)
        return (outs, weights) if return_weights else outs

    def feedforward(self, a: Tensor, train: bool, rng: np.random.Generator | None) -> Tensor:
        p = self.params
        for k in range(self.cfg.n_blocks):
            hidden = ag.relu(ag.matmul(a, p[f"ff.{k}.w1"]) + p[f"ff.{k}.b1"])
            ff = ag.matmul(hidden, p[f"ff.{k}.w2"]) + p[f"ff.{k}.b2"]
            ff = ag.dropout(ff, self.cfg.dropout, rng, train)
            a = ag.layer_norm(a + ff, p[f"norm.{k}.gain"], p[f"norm.{k}.bias"], self.cfg.ln_eps)
        return a

    def forward(self, x: np.ndarray, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Representation ``[B, d_model]`` for windows ``[B, l, d]`` (or ``[d_model]`` for one window)."""
        if train and self.cfg.dropout > 0 and rng is None:
            raise ValueError("training-mode forward with dropout needs an rng")
        z = self.embed(x)
        a = aggregate(self.attend(z))
        a = self.feedforward(a, train, rng)
        return ag.mean(a, axis=-2)

    __call__ = forward

    def represent(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Eval-mode representations as a plain array, computed in chunks."""
        if len(x) == 0:
            return np.zeros((0, self.cfg.d_model), dtype=self.dtype)
        with ag.no_grad():
            return np.concatenate([self.forward(x[i : i + batch_size]).data for i in range(0, len(x), batch_size)])
