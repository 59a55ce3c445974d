"""Next-item BCE loss, the head/tail discriminator, and their adversarial pairing."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ParamSet
from .encoders import encode, score

LOGIT_CLAMP = 30.0


@dataclass
class MiniBatch:
    """K windows drawn from a single user's task."""

    user: int
    windows: np.ndarray      # (K, L) item indices, left padded
    targets: np.ndarray      # (K,)
    negatives: np.ndarray    # (K, n)
    label: int               # 1 = head user, 0 = tail user

    def __post_init__(self):
        self.windows = np.atleast_2d(np.asarray(self.windows, dtype=np.int64))
        self.targets = np.asarray(self.targets, dtype=np.int64).reshape(-1)
        self.negatives = np.asarray(self.negatives, dtype=np.int64).reshape(len(self.targets), -1)
        if len(self.windows) < 1 or len(self.windows) != len(self.targets):
            raise ValueError("MiniBatch: need K >= 1 windows, one target per window")
        if self.negatives.shape[1] < 1:
            raise ValueError("MiniBatch: need at least one negative per positive")
        if self.label not in (0, 1):
            raise ValueError(f"MiniBatch: label must be 0 or 1, got {self.label!r}")


def bce_from_scores(pos: Node, neg: Node) -> Node:
    """Mean over windows of -log s(pos) - sum_j log(1 - s(neg_j)).

    ``pos`` has shape (K,), ``neg`` shape (K, n).
    """
    per_window = -ad.log_sigmoid(pos) - ad.sum_(ad.log_sigmoid(-neg), axis=1)
    return ad.mean(per_window)


def bce_loss(batch: MiniBatch, params: Mapping[str, Node], kind: str, embedding: Node | None = None) -> Node:
    emb = encode(kind, batch.windows, params) if embedding is None else embedding
    pos = ad.reshape(score(emb, batch.targets[:, None], params), (len(batch.targets),))
    neg = score(emb, batch.negatives, params)
    return bce_from_scores(pos, neg)


def init_disc_params(dim: int, hidden: int, rng: np.random.Generator) -> ParamSet:
    b1 = 1.0 / np.sqrt(dim)
    b2 = 1.0 / np.sqrt(hidden)
    return ParamSet({
        "disc.W_1": rng.uniform(-b1, b1, (dim, hidden)),
        "disc.b_1": rng.uniform(-b1, b1, (hidden,)),
        "disc.W_2": rng.uniform(-b2, b2, (hidden, 1)),
        "disc.b_2": rng.uniform(-b2, b2, (1,)),
    })


def disc_logit(embedding: Node, disc: Mapping[str, Node]) -> Node:
    emb = embedding if embedding.value.ndim == 2 else ad.reshape(embedding, (1, -1))
    hidden = ad.tanh(emb @ disc["disc.W_1"] + disc["disc.b_1"])
    logit = ad.reshape(hidden @ disc["disc.W_2"] + disc["disc.b_2"], (emb.shape[0],))
    return ad.clamp(logit, -LOGIT_CLAMP, LOGIT_CLAMP)


def disc_prob(embedding, disc: Mapping[str, np.ndarray]) -> np.ndarray:
    """Head probability for plain arrays (no graph kept)."""
    emb = embedding if isinstance(embedding, Node) else ad.const(embedding)
    nodes = {k: ad.const(v) for k, v in disc.items()}
    return ad.sigmoid(disc_logit(emb, nodes)).value


def disc_loglik_terms(embedding: Node, label, disc: Mapping[str, Node]) -> Node:
    """Per-row R log f_d + (1 - R) log(1 - f_d); shape (B,)."""
    logit = disc_logit(embedding, disc)
    r = np.broadcast_to(np.asarray(label, dtype=float), logit.shape)
    return ad.const(r) * ad.log_sigmoid(logit) + ad.const(1.0 - r) * ad.log_sigmoid(-logit)


def disc_loglik(embedding: Node, label, disc: Mapping[str, Node]) -> Node:
    """Mean log-likelihood of the correct head/tail label (<= 0; 0 is perfect)."""
    return ad.mean(disc_loglik_terms(embedding, label, disc))


@dataclass
class AdversarialLosses:
    predictor: Node
    discriminator: Node
    bce: Node
    loglik: float
    accuracy: float


def adversarial_losses(
    batch: MiniBatch,
    params: Mapping[str, Node],
    disc: Mapping[str, Node] | None,
    lam: float,
    kind: str,
) -> AdversarialLosses:
    """Predictor loss ``bce + lam * mean loglik`` and discriminator loss ``-mean loglik``.

    Each loss lives on its own graph: the discriminator sees the embeddings
    as constants and the predictor sees the discriminator weights as
    constants.  With ``lam == 0`` the adversarial term is not built at all.
    ``disc=None`` skips the discriminator entirely.
    """
    if lam < 0:
        raise ValueError(f"adversarial weight must be >= 0, got {lam}")
    emb = encode(kind, batch.windows, params)
    bce = bce_loss(batch, params, kind, embedding=emb)
    pred = bce
    if disc is None:
        return AdversarialLosses(pred, None, bce, float("nan"), float("nan"))
    if lam > 0:
        frozen = {k: ad.const(v.value) for k, v in disc.items()}
        pred = bce + ad.const(lam) * disc_loglik(emb, batch.label, frozen)
    terms = disc_loglik_terms(emb.detach(), batch.label, disc)
    disc_loss = -ad.mean(terms)
    correct = np.exp(terms.value) > 0.5
    return AdversarialLosses(pred, disc_loss, bce, float(terms.value.mean()), float(correct.mean()))
