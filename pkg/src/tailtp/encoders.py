"""Sequence encoders and the dot-product scoring head.

A prediction model is ``score(encode(window))``: an encoder summarises the
last ``L`` items into a vector of size ``d``; the head scores candidate items
by dot product with their (shared) input embeddings.  Item index 0 is the
padding item and its embedding row is held at zero.

All functions take a mapping of parameter name to :class:`Node`, so the same
code serves training (trainable leaves) and evaluation (constants).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ParamSet

PAD = 0
MASK_VALUE = -1e9

ENCODERS = ("gru", "attention")


@dataclass(frozen=True)
class ItemVocab:
    n_items: int

    def check(self, index) -> np.ndarray:
        idx = np.asarray(index)
        if idx.size and (idx.min() < 0 or idx.max() > self.n_items):
            raise IndexError(f"item index out of vocabulary range [0, {self.n_items}]")
        return idx


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    n_items: int
    dim: int
    window: int
    depth: int = 1

    def __post_init__(self):
        if self.kind not in ENCODERS:
            raise ValueError(f"unknown encoder {self.kind!r}; expected one of {ENCODERS}")
        if self.dim < 1 or self.window < 1 or self.depth < 1:
            raise ValueError("dim, window and depth must be positive")


def _uniform(rng: np.random.Generator, shape, dim: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(dim)
    return rng.uniform(-bound, bound, size=shape)


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParamSet:
    d = spec.dim
    p = {}
    emb = _uniform(rng, (spec.n_items + 1, d), d)
    emb[PAD] = 0.0
    p["item_emb"] = emb
    if spec.kind == "gru":
        for gate in ("z", "r", "n"):
            p[f"gru.W_{gate}"] = _uniform(rng, (d, d), d)
            p[f"gru.U_{gate}"] = _uniform(rng, (d, d), d)
            p[f"gru.b_{gate}"] = _uniform(rng, (d,), d)
    else:
        p["att.pos"] = _uniform(rng, (spec.window, d), d)
        for b in range(spec.depth):
            for w in ("W_q", "W_k", "W_v", "W_1", "W_2"):
                p[f"att.{b}.{w}"] = _uniform(rng, (d, d), d)
            p[f"att.{b}.b_1"] = _uniform(rng, (d,), d)
            p[f"att.{b}.b_2"] = _uniform(rng, (d,), d)
    return ParamSet(p)


def _windows(windows, n_items: int) -> np.ndarray:
    w = np.asarray(windows)
    if w.ndim == 1:
        w = w[None, :]
    if w.ndim != 2:
        raise ValueError(f"windows must be 1-D or 2-D, got shape {w.shape}")
    w = w.astype(np.int64, copy=False)
    if w.size and (w.min() < 0 or w.max() > n_items):
        raise IndexError(f"item index out of vocabulary range [0, {n_items}]")
    return w


def encode_recurrent(windows, params: Mapping[str, Node]) -> Node:
    """Final hidden state of a GRU run left to right; shape (batch, d).

    Padding positions leave the hidden state untouched, so left padding has no
    effect on the result.
    """
    emb = params["item_emb"]
    w = _windows(windows, emb.shape[0] - 1)
    B, L = w.shape
    d = emb.shape[1]
    x = ad.gather(emb, w)                                   # (B, L, d)
    xz = x @ params["gru.W_z"]
    xr = x @ params["gru.W_r"]
    xn = x @ params["gru.W_n"]
    h = ad.const(np.zeros((B, d)))
    for t in range(L):
        real = (w[:, t] != PAD).astype(float)[:, None]
        if not real.any():
            continue
        z = ad.sigmoid(ad.take(xz, t, 1) + h @ params["gru.U_z"] + params["gru.b_z"])
        r = ad.sigmoid(ad.take(xr, t, 1) + h @ params["gru.U_r"] + params["gru.b_r"])
        n = ad.tanh(ad.take(xn, t, 1) + r * (h @ params["gru.U_n"]) + params["gru.b_n"])
        h_new = (1.0 - z) * n + z * h
        if real.all():
            h = h_new
        else:
            h = ad.const(real) * h_new + ad.const(1.0 - real) * h
    return h


def _attention_bias(w: np.ndarray) -> np.ndarray:
    L = w.shape[1]
    causal = np.tril(np.ones((L, L), dtype=bool))
    allowed = causal[None, :, :] & (w != PAD)[:, None, :]
    return np.where(allowed, 0.0, MASK_VALUE)


def _attention_blocks(windows, params: Mapping[str, Node], record: list | None = None) -> tuple[Node, np.ndarray]:
    emb = params["item_emb"]
    pos = params["att.pos"]
    w = _windows(windows, emb.shape[0] - 1)
    L = w.shape[1]
    if L > pos.shape[0]:
        raise ValueError(f"window length {L} exceeds positional table size {pos.shape[0]}")
    d = emb.shape[1]
    # positions counted back from the most recent item
    x = ad.gather(emb, w) + ad.gather(pos, np.arange(L - 1, -1, -1))
    bias = ad.const(_attention_bias(w))
    scale = ad.const(1.0 / np.sqrt(d))
    depth = sum(1 for k in params if k.startswith("att.") and k.endswith(".W_q"))
    for b in range(depth):
        q = x @ params[f"att.{b}.W_q"]
        k = x @ params[f"att.{b}.W_k"]
        v = x @ params[f"att.{b}.W_v"]
        att = ad.softmax((q @ ad.transpose(k)) * scale + bias)
        if record is not None:
            record.append(att.value)
        h = x + att @ v
        ff = ad.tanh(h @ params[f"att.{b}.W_1"] + params[f"att.{b}.b_1"]) @ params[f"att.{b}.W_2"]
        x = h + ff + params[f"att.{b}.b_2"]
    return x, w


def encode_attention(windows, params: Mapping[str, Node]) -> Node:
    """Causal self-attention over the window; representation at the last position.

    Windows are left padded, so the last position is the most recent real
    item.  A window made only of padding encodes to the zero vector.
    """
    x, w = _attention_blocks(windows, params)
    out = ad.take(x, -1, 1)
    has_item = (w != PAD).any(axis=1)
    if not has_item.all():
        out = out * ad.const(has_item.astype(float)[:, None])
    return out


def attention_weights(windows, params: Mapping[str, Node], block: int = 0) -> np.ndarray:
    """Attention weights of the last query position in ``block``; shape (batch, L)."""
    record: list[np.ndarray] = []
    _attention_blocks(windows, params, record)
    return record[block][:, -1, :]


def encode(kind: str, windows, params: Mapping[str, Node]) -> Node:
    if kind == "gru":
        return encode_recurrent(windows, params)
    if kind == "attention":
        return encode_attention(windows, params)
    raise ValueError(f"unknown encoder {kind!r}; expected one of {ENCODERS}")


def score(embedding: Node, items, params: Mapping[str, Node]) -> Node:
    """Dot-product scores.

    ``items`` of shape (M,) scores every row of ``embedding`` against the same
    M items -> (B, M).  ``items`` of shape (B, M) scores row b against its own
    M items -> (B, M).
    """
    table = params["item_emb"]
    idx = np.asarray(items, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("score: no items given")
    n = table.shape[0] - 1
    if idx.min() < 1 or idx.max() > n:
        raise IndexError(f"score: item index out of range [1, {n}]")
    emb = embedding if embedding.value.ndim == 2 else ad.reshape(embedding, (1, -1))
    rows = ad.gather(table, idx)
    if idx.ndim == 1:
        return emb @ ad.transpose(rows)
    B, d = emb.shape
    return ad.sum_(rows * ad.reshape(emb, (B, 1, d)), axis=-1)


def score_all(embedding: Node, params: Mapping[str, Node]) -> Node:
    """Scores for every real item 1..|I|; column j-1 holds item j."""
    n = params["item_emb"].shape[0] - 1
    return score(embedding, np.arange(1, n + 1), params)
