"""Command line entry point: ``tailtp {gen-synth,train,eval,ablate,verify}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import subprocess
import sys
import time
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np

from .autodiff import ParamSet, load_params, save_params
from .dataio import DataError, DatasetBundle, SynthConfig, prepare, synth_generate, write_tsv
from .evalkit import evaluate, probe_accuracy
from .trainer import MODES, ConfigError, Trainer, TrainerConfig

log = logging.getLogger("tailtp")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
SWEEPS = {"k": ("k", [1, 2, 3, 4, 5]), "lambda": ("lam", [0.0, 0.01, 0.1, 1.0, 10.0])}
SWEEP_FIELDS = ("param", "value", "seed", "tail_hr10", "head_hr10", "all_hr10", "new_hr10",
                "disc_acc", "probe_acc")
CHECKPOINT = "model.ltap"
DISC_CHECKPOINT = "disc.ltap"
MANIFEST = "manifest.txt"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# manifests


def build_id() -> str:
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    try:
        return "v" + metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(path: Path, entries: dict) -> None:
    """key=value lines, written to a temp file and renamed into place."""
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(f"{k}={v}\n" for k, v in entries.items()), encoding="utf-8")
    os.replace(tmp, path)


def read_manifest(path: Path) -> dict[str, str]:
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    return out


def manifest_entries(command: str, cfg: TrainerConfig | None, data_path, data: DatasetBundle | None,
                     started: str, outputs: dict[str, Path], **extra) -> dict:
    entries = {"command": command, "build": build_id()}
    entries.update({k: v for k, v in extra.items() if v is not None})
    if cfg is not None:
        for k, v in dataclasses.asdict(cfg).items():
            entries[f"config.{k}"] = repr(v) if isinstance(v, float) else v
    if data_path is not None:
        entries["data"] = Path(data_path).resolve()
    if data is not None:
        entries["data_hash"] = data.content_hash
        entries["vocab"] = data.vocab_fingerprint()
        entries["n_items"] = data.n_items
    entries["started"] = started
    entries["finished"] = _now()
    for name, p in outputs.items():
        entries[f"output.{name}"] = Path(p).resolve()
    return entries


def config_from_manifest(m: dict[str, str]) -> TrainerConfig:
    return TrainerConfig.from_mapping({k[7:]: v for k, v in m.items() if k.startswith("config.")})


# ---------------------------------------------------------------------------
# helpers


def load_config(path, seed: int | None) -> TrainerConfig:
    if path is None:
        cfg = TrainerConfig()
    else:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        cfg = TrainerConfig.load(p)
    return cfg if seed is None else cfg.replace(seed=seed)


def load_data(path, cfg: TrainerConfig, cache: str | None) -> DatasetBundle:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"dataset not found: {p}")
    return prepare(p, cfg.window, cfg.existing_fraction, cfg.head_fraction, cfg.data_seed, cache)


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _progress(every: int):
    def cb(row):
        if every and row["iteration"] % every == 0:
            log.info("iter %d pred_loss %.4f disc_loss %.4f disc_acc %.2f", row["iteration"],
                     row["pred_loss"], row["disc_loss"], row["disc_acc"])
    return cb


def final_disc_acc(history: list[dict], tail: float = 0.1) -> float:
    """Mean inner-step discriminator accuracy over the last ``tail`` of training."""
    if not history:
        return float("nan")
    n = max(1, int(len(history) * tail))
    return float(np.mean([r["disc_acc"] for r in history[-n:]]))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_synth(args) -> int:
    fields = {f.name: f for f in dataclasses.fields(SynthConfig)}
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        if k not in fields:
            raise UsageError(f"unknown generator key {k!r}; valid keys: {', '.join(fields)}")
        overrides[k] = int(v) if fields[k].type == "int" else float(v)
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = SynthConfig(**overrides)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_tsv(synth_generate(cfg), out)
    print(f"wrote {out}")
    return EXIT_OK


def run_training(cfg: TrainerConfig, data: DatasetBundle, mode: str, log_every: int = 0) -> Trainer:
    return Trainer(cfg, data, mode).train(callback=_progress(log_every))


def cmd_train(args) -> int:
    started = _now()
    cfg = load_config(args.config, args.seed)
    data = load_data(args.data, cfg, args.cache)
    out = _out_dir(args.out)
    t0 = time.perf_counter()
    tr = run_training(cfg, data, args.mode, args.log_every)
    log.info("trained %d iterations in %.1fs", tr.iteration, time.perf_counter() - t0)
    outputs = {"checkpoint": out / CHECKPOINT, "discriminator": out / DISC_CHECKPOINT,
               "train_log": out / "train_log.csv"}
    save_params(outputs["checkpoint"], tr.params)
    save_params(outputs["discriminator"], tr.disc)
    tr.write_log(outputs["train_log"])
    write_manifest(out / MANIFEST, manifest_entries("train", cfg, args.data, data, started, outputs,
                                                    mode=args.mode))
    print(f"wrote {out / CHECKPOINT}")
    return EXIT_OK


def check_compatible(params: ParamSet, data: DatasetBundle, manifest: dict[str, str] | None) -> None:
    rows = params["item_emb"].shape[0] if "item_emb" in params else None
    if rows != data.n_items + 1:
        raise DataError(f"checkpoint has {rows} item rows but dataset vocabulary needs {data.n_items + 1}")
    if manifest and manifest.get("vocab") and manifest["vocab"] != data.vocab_fingerprint():
        raise DataError(f"checkpoint vocabulary {manifest['vocab']} differs from dataset "
                        f"vocabulary {data.vocab_fingerprint()}")


def cmd_eval(args) -> int:
    started = _now()
    ckpts = [Path(c) for c in args.checkpoint]
    for c in ckpts:
        if not c.is_file():
            raise UsageError(f"checkpoint not found: {c}")
    manifests = [read_manifest(c.parent / MANIFEST) if (c.parent / MANIFEST).is_file() else None
                 for c in ckpts]
    if args.config is not None:
        cfg = load_config(args.config, None)
    elif manifests[0] is not None:
        cfg = config_from_manifest(manifests[0])
    else:
        raise UsageError("no --config given and no manifest next to the checkpoint")
    data = load_data(args.data, cfg, args.cache)
    models = []
    for c, m in zip(ckpts, manifests):
        p = load_params(c)
        check_compatible(p, data, m)
        models.append(p)
    cutoffs = tuple(int(x) for x in args.cutoffs.split(","))
    report = evaluate(cfg.encoder, models, data, cutoffs)
    out = _out_dir(args.out)
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    print(report.to_table())
    write_manifest(out / MANIFEST, manifest_entries(
        "eval", cfg, args.data, data, started, {"report": out / "report.csv"},
        checkpoints=",".join(str(c.resolve()) for c in ckpts)))
    return EXIT_OK


def parse_values(text: str | None, default: list) -> list[float]:
    if text is None:
        return list(default)
    vals = [v.strip() for v in text.split(",") if v.strip()]
    if not vals:
        raise UsageError("sweep list is empty")
    return [float(v) for v in vals]


def sweep_rows(cfg: TrainerConfig, data: DatasetBundle, sweep: str, values, seeds, mode: str = "tp"):
    key, _ = SWEEPS[sweep]
    if not values:
        raise UsageError("sweep list is empty")
    for seed in seeds:
        for v in values:
            run_cfg = cfg.replace(seed=int(seed), **{key: int(v) if key == "k" else float(v)})
            tr = run_training(run_cfg, data, mode)
            rep = evaluate(run_cfg.encoder, tr.params, data, (10,))
            new_hr = rep.mean("new", 10) if data.new else float("nan")
            yield {
                "param": sweep, "value": v, "seed": int(seed),
                "tail_hr10": rep.mean("tail", 10), "head_hr10": rep.mean("head", 10),
                "all_hr10": rep.mean("all", 10), "new_hr10": new_hr,
                "disc_acc": final_disc_acc(tr.history),
                "probe_acc": probe_accuracy(run_cfg.encoder, tr.params, data, seed=int(seed)),
            }


def cmd_ablate(args) -> int:
    started = _now()
    cfg = load_config(args.config, args.seed)
    values = parse_values(args.values, SWEEPS[args.sweep][1])
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    data = load_data(args.data, cfg, args.cache)
    out = _out_dir(args.out)
    path = out / f"sweep_{args.sweep}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in sweep_rows(cfg, data, args.sweep, values, seeds):
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) and k != "value" else v)
                        for k, v in row.items()})
            fh.flush()
            log.info("%s=%s seed %d tail HR@10 %.4f", args.sweep, row["value"], row["seed"], row["tail_hr10"])
    write_manifest(out / MANIFEST, manifest_entries("ablate", cfg, args.data, data, started,
                                                    {"sweep": path}, sweep=args.sweep))
    print(f"wrote {path}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_all
    results = run_all()
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} suite(s) failed: {', '.join(failed)}")
        return EXIT_RUNTIME
    print("all suites passed")
    return EXIT_OK


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tailtp", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-synth", help="write a synthetic long-tailed TSV corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--set", action="append", metavar="KEY=VALUE", help="generator setting (repeatable)")
    g.set_defaults(func=cmd_gen_synth)

    def common(sp, mode=False):
        sp.add_argument("--config")
        sp.add_argument("--data", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--cache", help="directory for the prepared-dataset cache")
        if mode:
            sp.add_argument("--mode", choices=MODES, default="tp")

    t = sub.add_parser("train", help="train one model")
    common(t, mode=True)
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="cohort HR/NDCG report for one or more checkpoints")
    e.add_argument("--checkpoint", action="append", required=True,
                   help="checkpoint file; repeat to aggregate repetitions")
    e.add_argument("--config")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--cutoffs", default="5,10,20")
    e.add_argument("--cache")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="sweep k or lambda")
    common(a)
    a.add_argument("--sweep", choices=sorted(SWEEPS), required=True)
    a.add_argument("--values", help="comma-separated grid (default: the standard grid)")
    a.add_argument("--seeds", help="comma-separated training seeds")
    a.set_defaults(func=cmd_ablate)

    v = sub.add_parser("verify", help="run the self-check suites")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failures, including data and training errors
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
