"""Gradient-alignment training: k inner SGD steps, one outer interpolation step.

Each iteration snapshots the predictor and discriminator weights, runs ``k``
inner updates on mini-batches from uniformly chosen users, then moves the
snapshot towards the result.  With the default Adam outer optimizer the
pseudo-gradient ``snapshot - inner_result`` is fed to Adam at rate ``beta``;
``outer = "sgd"`` uses the plain interpolation ``(1 - beta) * snapshot +
beta * inner_result``.

``mode = "joint"`` is the conventional baseline: the same mini-batch stream
consumed by plain SGD with no outer step and no adversarial term.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet
from .dataio import DatasetBundle, sample_negatives
from .encoders import ModelSpec, init_params
from .objectives import MiniBatch, adversarial_losses, init_disc_params

log = logging.getLogger(__name__)

MODES = ("tp", "joint")
LOG_FIELDS = ("iteration", "pred_loss", "disc_loss", "disc_acc", "pseudo_grad_norm")


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainerConfig:
    alpha: float = 0.1
    beta: float = 0.001
    k: int = 2
    lam: float = 0.1
    batch_size: int = 8
    window: int = 5
    negatives: int = 3
    dim: int = 16
    encoder: str = "gru"
    depth: int = 1
    disc_hidden: int = 0          # 0 -> same as dim
    outer: str = "adam"
    max_iters: int = 1000
    seed: int = 0
    data_seed: int = 0
    head_fraction: float = 0.2
    existing_fraction: float = 0.8
    l2: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.alpha > 0, "alpha must be > 0"),
            (self.beta > 0, "beta must be > 0"),
            (self.k >= 1, "k must be >= 1"),
            (self.lam >= 0, "lam must be >= 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.window >= 1, "window must be >= 1"),
            (self.negatives >= 1, "negatives must be >= 1"),
            (self.dim >= 1, "dim must be >= 1"),
            (self.outer in ("adam", "sgd"), "outer must be 'adam' or 'sgd'"),
            (self.max_iters >= 0, "max_iters must be >= 0"),
            (0 < self.head_fraction < 1, "head_fraction must be in (0, 1)"),
            (0 < self.existing_fraction <= 1, "existing_fraction must be in (0, 1]"),
            (self.l2 >= 0, "l2 must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        ModelSpec(self.encoder, 1, self.dim, self.window, self.depth)

    @property
    def hidden(self) -> int:
        return self.disc_hidden or self.dim

    def replace(self, **changes) -> "TrainerConfig":
        return dataclasses.replace(self, **changes)

    # flat key=value text format
    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "TrainerConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = [k for k in values if k not in fields]
        if unknown:
            raise ConfigError(f"unknown config key(s) {unknown}; valid keys: {', '.join(fields)}")
        kwargs = {}
        for k, raw in values.items():
            typ = fields[k].type
            try:
                kwargs[k] = _coerce(raw, typ)
            except ValueError:
                raise ConfigError(f"config key {k!r}: cannot parse {raw!r} as {typ}") from None
        return cls(**kwargs)

    @classmethod
    def parse(cls, text: str) -> "TrainerConfig":
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            values[key] = val
        return cls.from_mapping(values)

    @classmethod
    def load(cls, path: str | Path) -> "TrainerConfig":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    def dumps(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in dataclasses.asdict(self).items())


def _coerce(raw: str, typ: str):
    if typ == "int":
        return int(raw)
    if typ == "float":
        return float(raw)
    return raw


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


# ---------------------------------------------------------------------------
# parameter arithmetic


def transfer_dot(grad_i: ParamSet, grad_j: ParamSet) -> float:
    """Flat dot product of two gradients; > 0 transfer, < 0 interference."""
    grad_i.check_compatible(grad_j, "transfer_dot")
    return float(sum(np.vdot(grad_i[k], grad_j[k]) for k in grad_i))


def sgd_step(params: ParamSet, grads: Mapping[str, np.ndarray], lr: float) -> ParamSet:
    return ParamSet((k, v - lr * grads[k]) if k in grads else (k, v) for k, v in params.items())


@dataclass
class AdamState:
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def outer_step(initial: ParamSet, inner: ParamSet, beta: float, state: AdamState | None = None) -> ParamSet:
    """Move ``initial`` towards ``inner``.

    ``state=None`` is plain interpolation ``(1 - beta) * initial + beta * inner``
    (exactly ``inner`` at beta = 1).  Otherwise the pseudo-gradient
    ``initial - inner`` goes through Adam with learning rate ``beta``.
    """
    initial.check_compatible(inner, "outer_step")
    if state is None:
        return ParamSet((k, (1.0 - beta) * initial[k] + beta * inner[k]) for k in initial)
    state.step += 1
    t = state.step
    out = []
    for k in initial:
        g = initial[k] - inner[k]
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        v = state.v[k]
        m *= state.b1
        m += (1 - state.b1) * g
        v *= state.b2
        v += (1 - state.b2) * g * g
        m_hat = m / (1 - state.b1 ** t)
        v_hat = v / (1 - state.b2 ** t)
        out.append((k, initial[k] - beta * m_hat / (np.sqrt(v_hat) + state.eps)))
    return ParamSet(out)


def _global_norm(a: ParamSet, b: ParamSet) -> float:
    return float(np.sqrt(sum(np.sum((a[k] - b[k]) ** 2) for k in a)))


# ---------------------------------------------------------------------------
# trainer


@dataclass
class StepStats:
    pred_loss: float
    disc_loss: float
    disc_acc: float


class Trainer:
    """Owns the parameter state for one training run."""

    def __init__(self, cfg: TrainerConfig, data: DatasetBundle, mode: str = "tp"):
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
        if not data.existing:
            raise TrainingError("no existing users to train on")
        self.cfg = cfg
        self.data = data
        self.mode = mode
        self.spec = ModelSpec(cfg.encoder, data.n_items, cfg.dim, cfg.window, cfg.depth)
        rng = np.random.default_rng([cfg.seed, 0xA11CE])
        self.params = init_params(self.spec, rng)
        self.disc = init_disc_params(cfg.dim, cfg.hidden, rng)
        self.iteration = 0
        self.adam = AdamState() if cfg.outer == "adam" else None
        self.adam_disc = AdamState() if cfg.outer == "adam" else None
        self.history: list[dict] = []
        self._labels = data.labels

    # -- batches -----------------------------------------------------------

    def step_rng(self, iteration: int, step: int) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, iteration, step])

    def sample_batch(self, rng: np.random.Generator) -> MiniBatch:
        cfg = self.cfg
        u = int(rng.integers(0, len(self.data.existing)))
        windows, targets = self.data.tasks[u]
        if len(targets) == 0:
            raise TrainingError(f"user {u} has no training windows")
        rows = rng.choice(len(targets), size=cfg.batch_size, replace=len(targets) < cfg.batch_size)
        negs = sample_negatives(self.data.interacted[u], self.data.n_items,
                                cfg.batch_size * cfg.negatives, rng)
        return MiniBatch(u, windows[rows], targets[rows], negs.reshape(cfg.batch_size, cfg.negatives),
                         int(self._labels[u]))

    # -- updates -----------------------------------------------------------

    def _grads(self, loss, leaves) -> dict[str, np.ndarray]:
        ad.backward(loss)
        grads = {}
        for k, node in leaves.items():
            g = node.grad
            if not np.isfinite(g).all():
                raise TrainingError(f"iteration {self.iteration}: non-finite gradient for {k!r}")
            grads[k] = g
        return grads

    def inner_step(self, params: ParamSet, disc: ParamSet, batch: MiniBatch,
                   lam: float | None = None) -> tuple[ParamSet, ParamSet, StepStats]:
        """SGD descent on the predictor loss, descent on the discriminator loss."""
        cfg = self.cfg
        lam = cfg.lam if lam is None else lam
        leaves = params.nodes()
        dleaves = disc.nodes()
        losses = adversarial_losses(batch, leaves, dleaves, lam, cfg.encoder)
        grads = self._grads(losses.predictor, leaves)
        if cfg.l2 > 0:
            for k in grads:
                decay = cfg.l2 * params[k]
                if k == "item_emb":
                    decay[0] = 0.0
                grads[k] = grads[k] + decay
        dgrads = self._grads(losses.discriminator, dleaves)
        new_params = sgd_step(params, grads, cfg.alpha)
        new_params["item_emb"][0] = 0.0
        stats = StepStats(float(losses.predictor.value), float(losses.discriminator.value), losses.accuracy)
        return new_params, sgd_step(disc, dgrads, cfg.alpha), stats

    def train_iteration(self) -> dict:
        cfg = self.cfg
        it = self.iteration
        start, start_d = self.params, self.disc
        params, disc = start, start_d
        stats = []
        lam = cfg.lam if self.mode == "tp" else 0.0
        for j in range(cfg.k):
            batch = self.sample_batch(self.step_rng(it, j))
            params, disc, s = self.inner_step(params, disc, batch, lam)
            stats.append(s)
        pseudo = _global_norm(start, params)
        if self.mode == "tp":
            self.params = outer_step(start, params, cfg.beta, self.adam)
            self.disc = outer_step(start_d, disc, cfg.beta, self.adam_disc)
            self.params["item_emb"][0] = 0.0
        else:
            self.params, self.disc = params, disc
        self.iteration += 1
        row = {
            "iteration": self.iteration,
            "pred_loss": float(np.mean([s.pred_loss for s in stats])),
            "disc_loss": float(np.mean([s.disc_loss for s in stats])),
            "disc_acc": float(np.mean([s.disc_acc for s in stats])),
            "pseudo_grad_norm": pseudo,
        }
        self.history.append(row)
        return row

    def train(self, iterations: int | None = None,
              callback: Callable[[dict], None] | None = None) -> "Trainer":
        n = self.cfg.max_iters if iterations is None else iterations
        for _ in range(n):
            row = self.train_iteration()
            if callback is not None:
                callback(row)
        return self

    def write_log(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            w.writeheader()
            for row in self.history:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
