"""Interaction ingestion, preprocessing, splits, task windows and synthetic data."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoders import PAD

log = logging.getLogger(__name__)

MIN_ITEM_RECORDS = 5
MIN_USER_RECORDS = 10


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    user: str
    item: str
    timestamp: int


@dataclass
class UserSequence:
    index: int
    user_id: str
    items: np.ndarray                  # chronological item indices
    cohort: str = ""                   # "existing" | "new"
    label: int = -1                    # 1 head, 0 tail, -1 unset
    target: int = PAD                  # held-out item (PAD until split)

    @property
    def length(self) -> int:
        return len(self.items)


# ---------------------------------------------------------------------------
# ingestion


def parse_interactions(path: str | Path) -> list[Interaction]:
    """Read ``user \\t item \\t timestamp`` lines; ``#`` lines are skipped."""
    events = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            user, item, ts = parts
            try:
                stamp = int(ts)
            except ValueError:
                raise DataError(f"{path}:{lineno}: timestamp {ts!r} is not an integer") from None
            events.append(Interaction(user, item, stamp))
    return events


def preprocess(
    events: Sequence[Interaction],
    min_item_records: int = MIN_ITEM_RECORDS,
    min_user_records: int = MIN_USER_RECORDS,
) -> tuple[list[UserSequence], list[str]]:
    """Drop rare items, then short users (single pass each), then sort by time.

    Returns the user sequences and the item vocabulary; ``vocab[j - 1]`` is
    the raw id of item index ``j`` (index 0 is padding).
    """
    item_counts: dict[str, int] = {}
    for e in events:
        item_counts[e.item] = item_counts.get(e.item, 0) + 1
    kept = [e for e in events if item_counts[e.item] >= min_item_records]

    per_user: dict[str, list[tuple[int, int, str]]] = {}
    for order, e in enumerate(kept):
        per_user.setdefault(e.user, []).append((e.timestamp, order, e.item))
    users = [u for u, evs in per_user.items() if len(evs) >= min_user_records]
    if not users:
        raise DataError("no users left after filtering")

    vocab: list[str] = []
    item_index: dict[str, int] = {}
    sequences = []
    for uidx, u in enumerate(users):
        evs = sorted(per_user[u])       # (timestamp, file order) -> stable ties
        idx = []
        for _, _, item in evs:
            if item not in item_index:
                vocab.append(item)
                item_index[item] = len(vocab)
            idx.append(item_index[item])
        sequences.append(UserSequence(uidx, u, np.asarray(idx, dtype=np.int64)))
    return sequences, vocab


def dataset_stats(sequences: Sequence[UserSequence], n_items: int) -> dict[str, float]:
    n_users = len(sequences)
    n_inter = sum(s.length for s in sequences)
    return {
        "users": n_users,
        "items": n_items,
        "interactions": n_inter,
        "records_per_user": n_inter / n_users if n_users else 0.0,
        "records_per_item": n_inter / n_items if n_items else 0.0,
        "density": n_inter / (n_users * n_items) if n_users and n_items else 0.0,
    }


# ---------------------------------------------------------------------------
# splits and labels


def split_users(
    sequences: Sequence[UserSequence], existing_fraction: float = 0.8, seed: int = 0
) -> tuple[list[UserSequence], list[UserSequence]]:
    """Random user-level split; existing users hold out their last item."""
    if not 0.0 < existing_fraction <= 1.0:
        raise ValueError("existing_fraction must be in (0, 1]")
    rng = np.random.default_rng(seed)
    n = len(sequences)
    n_existing = int(round(existing_fraction * n))
    chosen = np.zeros(n, dtype=bool)
    chosen[rng.permutation(n)[:n_existing]] = True
    existing, new = [], []
    for s, is_existing in zip(sequences, chosen):
        if is_existing:
            existing.append(UserSequence(s.index, s.user_id, s.items[:-1].copy(), "existing",
                                         target=int(s.items[-1])))
        else:
            new.append(UserSequence(s.index, s.user_id, s.items[:-1].copy(), "new",
                                    target=int(s.items[-1])))
    return existing, new


def head_tail_label(counts: Sequence[int], head_fraction: float = 0.2) -> np.ndarray:
    """1 for the ceil(fraction * n) most active users (ties: lower position first)."""
    if not 0.0 < head_fraction < 1.0:
        raise ValueError("head_fraction must be in (0, 1)")
    counts = np.asarray(counts)
    n = len(counts)
    n_head = math.ceil(head_fraction * n - 1e-9)
    order = np.lexsort((np.arange(n), -counts))
    labels = np.zeros(n, dtype=np.int64)
    labels[order[:n_head]] = 1
    return labels


def label_users(users: Sequence[UserSequence], head_fraction: float = 0.2) -> None:
    labels = head_tail_label([u.length for u in users], head_fraction)
    for u, r in zip(users, labels):
        u.label = int(r)


# ---------------------------------------------------------------------------
# task windows


def left_pad(items: Sequence[int], length: int) -> np.ndarray:
    items = np.asarray(items, dtype=np.int64)[-length:] if length else np.zeros(0, dtype=np.int64)
    out = np.full(length, PAD, dtype=np.int64)
    if len(items):
        out[length - len(items):] = items
    return out


def build_tasks(sequence: Sequence[int], window: int) -> tuple[np.ndarray, np.ndarray]:
    """All (previous-``window``-items, next item) pairs of one sequence.

    Targets run over positions L+1..|S| (1-based).  Sequences no longer than
    ``window`` use every position from 2 on, left padded.
    """
    seq = np.asarray(sequence, dtype=np.int64)
    n = len(seq)
    first = window if n > window else 1
    if n <= first:
        return np.zeros((0, window), dtype=np.int64), np.zeros(0, dtype=np.int64)
    windows = np.stack([left_pad(seq[max(0, t - window):t], window) for t in range(first, n)])
    return windows, seq[first:].copy()


# ---------------------------------------------------------------------------
# negatives


def sample_negatives(interacted: np.ndarray, n_items: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draws (with replacement) from items 1..n_items not in ``interacted``.

    ``interacted`` must be a sorted array of unique item indices.
    """
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    n_eligible = n_items - len(interacted)
    if n_eligible <= 0:
        raise DataError("user has interacted with every item; no negatives exist")
    if n_eligible * 2 < n_items:
        mask = np.ones(n_items + 1, dtype=bool)
        mask[PAD] = False
        mask[interacted] = False
        eligible = np.flatnonzero(mask)
        return eligible[rng.integers(0, len(eligible), size=count)]
    out = np.empty(count, dtype=np.int64)
    filled = 0
    while filled < count:
        draw = rng.integers(1, n_items + 1, size=2 * (count - filled))
        pos = np.searchsorted(interacted, draw)
        hit = (pos < len(interacted)) & (interacted[np.minimum(pos, len(interacted) - 1)] == draw)
        good = draw[~hit][: count - filled]
        out[filled:filled + len(good)] = good
        filled += len(good)
    return out


# ---------------------------------------------------------------------------
# prepared dataset


@dataclass
class DatasetBundle:
    n_items: int
    window: int
    existing: list[UserSequence]
    new: list[UserSequence]
    item_ids: list[str] = field(default_factory=list)
    content_hash: str = ""
    tasks: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    interacted: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.tasks:
            self.tasks = [build_tasks(u.items, self.window) for u in self.existing]
        if not self.interacted:
            # the held-out target is part of the user's sequence, so never a negative
            self.interacted = [np.unique(np.append(u.items, u.target)) if u.target != PAD
                               else np.unique(u.items) for u in self.existing]

    @property
    def labels(self) -> np.ndarray:
        return np.array([u.label for u in self.existing], dtype=np.int64)

    def eval_windows(self, users: Sequence[UserSequence]) -> np.ndarray:
        return np.stack([left_pad(u.items, self.window) for u in users])

    def vocab_fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.item_ids).encode("utf-8")).hexdigest()[:16]


def assemble(
    sequences: Sequence[UserSequence],
    vocab: Sequence[str],
    window: int,
    existing_fraction: float = 0.8,
    head_fraction: float = 0.2,
    seed: int = 0,
    content_hash: str = "",
) -> DatasetBundle:
    existing, new = split_users(sequences, existing_fraction, seed)
    label_users(existing, head_fraction)
    if new:
        label_users(new, head_fraction)
    return DatasetBundle(len(vocab), window, existing, new, list(vocab), content_hash)


def _cache_key(raw: bytes, settings: dict) -> str:
    h = hashlib.sha256(raw)
    h.update(json.dumps(settings, sort_keys=True).encode("utf-8"))
    return h.hexdigest()


def _save_cache(path: Path, bundle: DatasetBundle) -> None:
    users = bundle.existing + bundle.new
    lengths = np.array([u.length for u in users], dtype=np.int64)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(
        tmp,
        meta=np.array([bundle.n_items, bundle.window, len(bundle.existing)], dtype=np.int64),
        item_ids=np.array(bundle.item_ids, dtype=str),
        user_ids=np.array([u.user_id for u in users], dtype=str),
        index=np.array([u.index for u in users], dtype=np.int64),
        label=np.array([u.label for u in users], dtype=np.int64),
        target=np.array([u.target for u in users], dtype=np.int64),
        lengths=lengths,
        items=np.concatenate([u.items for u in users]) if users else np.zeros(0, dtype=np.int64),
        content_hash=np.array(bundle.content_hash),
    )
    tmp.replace(path)


def _load_cache(path: Path) -> DatasetBundle:
    z = np.load(path, allow_pickle=False)
    n_items, window, n_existing = (int(x) for x in z["meta"])
    offsets = np.concatenate([[0], np.cumsum(z["lengths"])])
    users = []
    for i, uid in enumerate(z["user_ids"]):
        users.append(UserSequence(
            int(z["index"][i]), str(uid), z["items"][offsets[i]:offsets[i + 1]].copy(),
            "existing" if i < n_existing else "new", int(z["label"][i]), int(z["target"][i]),
        ))
    return DatasetBundle(n_items, window, users[:n_existing], users[n_existing:],
                         [str(x) for x in z["item_ids"]], str(z["content_hash"]))


def prepare(
    path: str | Path,
    window: int,
    existing_fraction: float = 0.8,
    head_fraction: float = 0.2,
    seed: int = 0,
    cache_dir: str | Path | None = None,
) -> DatasetBundle:
    """Parse, preprocess, split and label a TSV file (cached by content hash)."""
    raw = Path(path).read_bytes()
    settings = dict(window=window, existing_fraction=existing_fraction, head_fraction=head_fraction,
                    seed=seed, min_item=MIN_ITEM_RECORDS, min_user=MIN_USER_RECORDS)
    key = _cache_key(raw, settings)
    cache_file = Path(cache_dir) / f"prepared-{key[:24]}.npz" if cache_dir else None
    if cache_file is not None and cache_file.exists():
        log.info("using prepared dataset cache %s", cache_file)
        return _load_cache(cache_file)
    sequences, vocab = preprocess(parse_interactions(path))
    bundle = assemble(sequences, vocab, window, existing_fraction, head_fraction, seed, key)
    if cache_file is not None:
        cache_file.parent.mkdir(parents=True, exist_ok=True)
        _save_cache(cache_file, bundle)
    return bundle


# ---------------------------------------------------------------------------
# synthetic long-tailed corpus


@dataclass(frozen=True)
class SynthConfig:
    users: int = 1000
    items: int = 200
    clusters: int = 20
    gamma: float = 1.5
    min_len: int = 10
    max_len: int = 400
    sharpness: float = 8.0
    rank: int = 3
    niche_gap: float = 0.8
    niche_slope: float = 4.0
    seed: int = 7


def synth_generate(cfg: SynthConfig = SynthConfig()) -> list[Interaction]:
    """Long-tailed user activity over a shared low-rank cluster Markov chain.

    Sequence lengths are ``floor(min_len * (1 + Lomax(gamma)))`` clamped to
    ``[min_len, max_len]``.  Each cluster holds a mainstream half and a niche
    half of its items; a user's niche propensity rises with their activity,
    so heavy users differ in taste from light ones while sharing the same
    cluster dynamics.
    """
    if cfg.min_len < MIN_USER_RECORDS:
        raise ValueError(f"min_len must be >= {MIN_USER_RECORDS} so users survive preprocessing")
    rng = np.random.default_rng(cfg.seed)
    C = cfg.clusters
    left = rng.normal(size=(C, cfg.rank))
    right = rng.normal(size=(C, cfg.rank))
    logits = cfg.sharpness * (left @ right.T) / np.sqrt(cfg.rank)
    trans = np.exp(logits - logits.max(axis=1, keepdims=True))
    trans /= trans.sum(axis=1, keepdims=True)

    members = [np.arange(c, cfg.items, C) for c in range(C)]
    halves = []
    for m in members:
        cut = (len(m) + 1) // 2
        parts = []
        for part in (m[:cut], m[cut:]):
            w = 1.0 / np.arange(1, len(part) + 1) ** 0.5
            parts.append((part, w / w.sum()))
        halves.append(parts)

    lengths = np.floor(cfg.min_len * (1.0 + rng.pareto(cfg.gamma, size=cfg.users))).astype(int)
    lengths = np.clip(lengths, cfg.min_len, cfg.max_len)
    span = math.log(cfg.max_len / cfg.min_len) or 1.0
    start = rng.integers(0, C, size=cfg.users)

    events = []
    for u in range(cfg.users):
        activity = math.log(lengths[u] / cfg.min_len) / span
        niche = 0.5 - cfg.niche_gap / 2 + cfg.niche_gap * min(1.0, cfg.niche_slope * activity)
        c = start[u]
        for t in range(lengths[u]):
            items, w = halves[c][1 if rng.random() < niche else 0]
            item = items[rng.choice(len(items), p=w)]
            events.append(Interaction(f"u{u}", f"i{item}", t + 1))
            c = rng.choice(C, p=trans[c])
    return events


def write_tsv(events: Iterable[Interaction], path: str | Path) -> None:
    lines = [f"{e.user}\t{e.item}\t{e.timestamp}\n" for e in events]
    Path(path).write_text("".join(lines), encoding="utf-8")
