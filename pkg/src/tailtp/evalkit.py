"""Full-ranking HR@N / NDCG@N, cohort reports and the head/tail probe."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet
from .dataio import DatasetBundle, UserSequence
from .encoders import PAD, encode

log = logging.getLogger(__name__)

DEFAULT_CUTOFFS = (5, 10, 20)
COHORTS = ("all", "existing", "new", "head", "tail",
           "existing_head", "existing_tail", "new_head", "new_tail")
REPORT_FIELDS = ("cohort", "cutoff", "metric", "mean", "std", "n")


def rank_target(scores: np.ndarray, target: int) -> int:
    """1-based rank of ``scores[target]``; ties go to the lower index."""
    scores = np.asarray(scores)
    if not 0 <= target < len(scores):
        raise IndexError(f"target {target} outside candidate range [0, {len(scores)})")
    s = scores[target]
    return int(1 + np.count_nonzero(scores > s) + np.count_nonzero(scores[:target] == s))


def item_rank(item_scores: np.ndarray, item: int) -> int:
    """Rank of item index ``item`` given scores for items 1..|I| (column j-1 = item j)."""
    if item == PAD:
        raise ValueError("the padding item cannot be a ranking target")
    return rank_target(item_scores, item - 1)


def rank_matrix(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Vectorised :func:`rank_target` over rows (targets are column indices)."""
    scores = np.asarray(scores)
    targets = np.asarray(targets)
    rows = np.arange(len(targets))
    s = scores[rows, targets][:, None]
    cols = np.arange(scores.shape[1])[None, :]
    better = (scores > s) | ((scores == s) & (cols < targets[:, None]))
    return 1 + better.sum(axis=1)


def hit_ratio(ranks, n: int) -> float:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("hit_ratio: no ranks")
    return float(np.mean(ranks <= n))


def ndcg(ranks, n: int) -> float:
    ranks = np.asarray(ranks, dtype=float)
    if ranks.size == 0:
        raise ValueError("ndcg: no ranks")
    gains = np.where(ranks <= n, 1.0 / np.log2(ranks + 1.0), 0.0)
    return float(gains.mean())


# ---------------------------------------------------------------------------
# cohort reports


@dataclass
class CohortReport:
    rows: list[dict] = field(default_factory=list)

    def get(self, cohort: str, cutoff: int, metric: str) -> dict:
        for r in self.rows:
            if r["cohort"] == cohort and r["cutoff"] == cutoff and r["metric"] == metric:
                return r
        raise KeyError((cohort, cutoff, metric))

    def mean(self, cohort: str, cutoff: int, metric: str = "HR") -> float:
        return self.get(cohort, cutoff, metric)["mean"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        for r in self.rows:
            w.writerow([r["cohort"], r["cutoff"], r["metric"], f"{r['mean']:.6f}", f"{r['std']:.6f}", r["n"]])
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [f"{'cohort':<14}{'N':>4}  {'metric':<6}{'mean':>10}{'std':>10}{'n':>7}"]
        for r in self.rows:
            lines.append(f"{r['cohort']:<14}{r['cutoff']:>4}  {r['metric']:<6}"
                         f"{r['mean']:>10.6f}{r['std']:>10.6f}{r['n']:>7}")
        return "\n".join(lines)


def cohort_masks(users: Sequence[UserSequence]) -> dict[str, np.ndarray]:
    cohort = np.array([u.cohort for u in users])
    head = np.array([u.label == 1 for u in users])
    existing = cohort == "existing"
    new = cohort == "new"
    return {
        "all": np.ones(len(users), dtype=bool),
        "existing": existing,
        "new": new,
        "head": head,
        "tail": ~head,
        "existing_head": existing & head,
        "existing_tail": existing & ~head,
        "new_head": new & head,
        "new_tail": new & ~head,
    }


def embed(kind: str, params: ParamSet, windows: np.ndarray, batch: int = 4096) -> np.ndarray:
    nodes = params.nodes(trainable=False)
    parts = [encode(kind, windows[i:i + batch], nodes).value for i in range(0, len(windows), batch)]
    return np.concatenate(parts) if parts else np.zeros((0, params["item_emb"].shape[1]))


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("LT_THREADS", "1")))
    except ValueError:
        return 1


def user_ranks(kind: str, params: ParamSet, data: DatasetBundle,
               users: Sequence[UserSequence] | None = None) -> np.ndarray:
    """Full-vocabulary rank of every user's held-out target."""
    users = list(data.existing) + list(data.new) if users is None else list(users)
    if not users:
        return np.zeros(0, dtype=np.int64)
    emb = embed(kind, params, data.eval_windows(users))
    table = params["item_emb"][1:]
    targets = np.array([u.target for u in users]) - 1
    if (targets < 0).any():
        raise ValueError("user without a held-out target")
    chunks = [slice(i, i + 512) for i in range(0, len(users), 512)]

    def work(sl):
        return rank_matrix(emb[sl] @ table.T, targets[sl])

    if _threads() > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(_threads()) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(sl) for sl in chunks]
    return np.concatenate(parts)


def evaluate(
    kind: str,
    models: Sequence[ParamSet] | ParamSet,
    data: DatasetBundle,
    cutoffs: Sequence[int] = DEFAULT_CUTOFFS,
) -> CohortReport:
    """HR@N and NDCG@N per cohort, mean and std across ``models`` (one per repetition)."""
    if isinstance(models, ParamSet):
        models = [models]
    if not models:
        raise ValueError("evaluate: need at least one model")
    users = list(data.existing) + list(data.new)
    masks = cohort_masks(users)
    ranks = [user_ranks(kind, p, data, users) for p in models]
    report = CohortReport()
    for cohort in COHORTS:
        mask = masks[cohort]
        n = int(mask.sum())
        if n == 0:
            log.warning("cohort %r is empty; omitted from report", cohort)
            continue
        for cutoff in cutoffs:
            for metric, fn in (("HR", hit_ratio), ("NDCG", ndcg)):
                vals = np.array([fn(r[mask], cutoff) for r in ranks])
                report.rows.append({"cohort": cohort, "cutoff": int(cutoff), "metric": metric,
                                    "mean": float(vals.mean()), "std": float(vals.std()), "n": n})
    return report


# ---------------------------------------------------------------------------
# frozen-embedding probe


def probe_accuracy(
    kind: str,
    params: ParamSet,
    data: DatasetBundle,
    seed: int = 0,
    windows_per_user: int = 4,
    hidden: int | None = None,
    steps: int = 300,
    lr: float = 0.01,
) -> float:
    """Balanced held-out accuracy of a fresh head/tail classifier on frozen embeddings.

    Users are split in half (stratified); each half is class-balanced by
    subsampling windows, so chance level is 0.5.  The classifier is a
    two-layer tanh perceptron trained full-batch with Adam.
    """
    from .objectives import disc_logit, init_disc_params
    from .trainer import AdamState, outer_step

    rng = np.random.default_rng([seed, 0x9B0BE])
    labels = data.labels
    feats, ys, owners = [], [], []
    for u, (windows, _) in enumerate(data.tasks):
        if len(windows) == 0:
            continue
        rows = rng.choice(len(windows), size=min(windows_per_user, len(windows)), replace=False)
        feats.append(windows[rows])
        ys.append(np.full(len(rows), labels[u]))
        owners.append(np.full(len(rows), u))
    windows = np.concatenate(feats)
    y = np.concatenate(ys)
    owner = np.concatenate(owners)
    x = embed(kind, params, windows)
    x = (x - x.mean(axis=0)) / (x.std(axis=0) + 1e-12)

    train_users = np.zeros(len(labels), dtype=bool)
    for cls in (0, 1):
        members = np.flatnonzero(labels == cls)
        train_users[rng.permutation(members)[: len(members) // 2]] = True

    def balanced(idx):
        pos, neg = idx[y[idx] == 1], idx[y[idx] == 0]
        m = min(len(pos), len(neg))
        return np.concatenate([rng.permutation(pos)[:m], rng.permutation(neg)[:m]])

    tr = balanced(np.flatnonzero(train_users[owner]))
    te = balanced(np.flatnonzero(~train_users[owner]))
    if len(tr) == 0 or len(te) == 0:
        raise ValueError("probe: one class is empty")

    probe = init_disc_params(x.shape[1], hidden or x.shape[1], rng)
    state = AdamState()
    xt, yt = ad.const(x[tr]), y[tr].astype(float)
    for _ in range(steps):
        leaves = probe.nodes()
        logit = disc_logit(xt, leaves)
        loss = -ad.mean(ad.const(yt) * ad.log_sigmoid(logit) + ad.const(1 - yt) * ad.log_sigmoid(-logit))
        ad.backward(loss)
        grads = ParamSet((k, n.grad) for k, n in leaves.items())
        # outer_step with a gradient pseudo-target is exactly one Adam step
        probe = outer_step(probe, ParamSet((k, probe[k] - grads[k]) for k in probe), lr, state)
    logit = disc_logit(ad.const(x[te]), probe.nodes(trainable=False)).value
    return float(np.mean((logit > 0) == (y[te] == 1)))
