"""Command line front end: ``synth``, ``train``, ``detect`` and ``eval``.

Settings resolve in this order, later wins: built-in defaults, the ``--config``
file (flat ``section.key = value`` lines), ``GEOMASK_SECTION__KEY`` environment
variables, then command-line flags.  Every command writes the resolved settings
to ``config.resolved`` in its output directory.

Exit codes: 0 ok, 1 I/O or parse error, 2 configuration error, 3 training
diverged, 4 checkpoint mismatch, 5 a category lacks normal or anomalous samples.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .datasets import BenchmarkConfig, PlyError, XyzError, build_benchmark, load_cloud, load_dataset, save_ply
from .geometry import DegenerateInputError
from .model import CheckpointError, ModelConfig, load_checkpoint
from .pipeline import MetricError, TrainConfig, evaluate, score, train

EXIT_IO, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECKPOINT, EXIT_METRIC = 1, 2, 3, 4, 5
ENV_PREFIX = "GEOMASK_"


class ConfigError(ValueError):
    pass


def _str_list(text):
    if isinstance(text, (list, tuple)):
        return tuple(text)
    return tuple(t.strip() for t in str(text).split(",") if t.strip())


def _float_pair(text):
    vals = tuple(float(v) for v in _str_list(text))
    if len(vals) != 2 or vals[0] > vals[1]:
        raise ValueError("expected 'low, high'")
    return vals


def _bool(text):
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"choose from {', '.join(options)}")
        return text
    return parse


def _schema() -> dict:
    s = {"seed": (int, 0), "threads": (int, 1)}
    bench = BenchmarkConfig()
    for f in fields(BenchmarkConfig):
        val = getattr(bench, f.name)
        if f.name in ("magnitude", "extent"):
            s[f"synth.{f.name}"] = (_float_pair, val)
        elif isinstance(val, tuple):
            s[f"synth.{f.name}"] = (_str_list, val)
        else:
            s[f"synth.{f.name}"] = (type(val), val)
    tc = TrainConfig()
    for name in ("epochs", "lr", "lr_drop_epoch", "lr_drop_factor", "weight_decay", "checkpoint_every"):
        val = getattr(tc, name)
        s[f"train.{name}"] = (type(val), val)
    s["train.lr_schedule"] = (_choice("step", "cosine"), tc.lr_schedule)
    s["train.log_every"] = (int, 10)
    mc = ModelConfig()
    for f in fields(ModelConfig):
        val = getattr(mc, f.name)
        s[f"model.{f.name}"] = (_bool if isinstance(val, bool) else type(val), val)
    s["eval.norm"] = (_choice("dataset", "sample"), "dataset")
    s["detect.norm"] = (_choice("calibrated", "sample"), "calibrated")
    return s


SCHEMA = _schema()


def _coerce(key: str, value, origin: str):
    if key not in SCHEMA:
        raise ConfigError(f"unknown setting {key!r} ({origin})")
    parse = SCHEMA[key][0]
    try:
        return parse(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key!r} ({origin}): {exc}") from None


def read_config_file(path) -> dict:
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, val = (t.strip() for t in line.split("=", 1))
        out[key] = _coerce(key, val, f"{path}:{n}")
    return out


def resolve(file_path=None, flags: dict | None = None, env=None,
            origins: dict | None = None) -> dict:
    """Merge defaults < file < environment < flags.  ``origins`` (if given) is
    filled with the source of every non-default setting."""
    cfg = {k: default for k, (_, default) in SCHEMA.items()}
    origins = {} if origins is None else origins
    if file_path is not None:
        for key, val in read_config_file(file_path).items():
            cfg[key], origins[key] = val, "file"
    env = os.environ if env is None else env
    for name in sorted(env):
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower().replace("__", ".")
            cfg[key], origins[key] = _coerce(key, env[name], f"environment {name}"), "env"
    for key, val in (flags or {}).items():
        if val is not None:
            cfg[key], origins[key] = _coerce(key, val, "command line"), "flag"
    return cfg


def _fmt(val) -> str:
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, (list, tuple)):
        return ", ".join(_fmt(v) for v in val)
    if isinstance(val, float):
        return repr(val)
    return str(val)


def write_resolved(cfg: dict, out: Path, keys=None) -> None:
    keys = sorted(cfg) if keys is None else keys
    with open(out / "config.resolved", "w") as fh:
        for k in keys:
            fh.write(f"{k} = {_fmt(cfg[k])}\n")


def _section(cfg: dict, prefix: str) -> dict:
    return {k[len(prefix) + 1:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}


def _keys(*prefixes) -> list[str]:
    return sorted(k for k in SCHEMA if k in ("seed", "threads") or k.split(".")[0] in prefixes)


def benchmark_config(cfg: dict) -> BenchmarkConfig:
    bc = BenchmarkConfig(**_section(cfg, "synth"))
    try:
        bc.validate()
    except ValueError as exc:
        raise ConfigError(f"synth.{exc}") from None
    return bc


def model_config(cfg: dict) -> ModelConfig:
    try:
        return ModelConfig(**_section(cfg, "model"))
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None


def train_config(cfg: dict, model: ModelConfig) -> TrainConfig:
    t = _section(cfg, "train")
    t.pop("log_every")
    try:
        return TrainConfig(seed=cfg["seed"], model=model, **t)
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args, cfg: dict) -> int:
    bc = benchmark_config(cfg)
    out = Path(args.out)
    keys = _keys("synth")
    resolved_text = "".join(f"{k} = {_fmt(cfg[k])}\n" for k in keys)
    marker = out / "config.resolved"
    if (out / "manifest.json").exists() and not args.force:
        if marker.exists() and marker.read_text() == resolved_text:
            print(f"up-to-date: {out} already holds this benchmark (use --force to regenerate)")
            return 0
        raise ConfigError(f"{out} holds a dataset generated with different settings; use --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    ds = build_benchmark(bc, seed=cfg["seed"], root=out)
    write_resolved(cfg, out, keys)
    print(f"{'category':<10} {'train':>5} {'normal':>6} {'anomalous':>9} {'points':>7}")
    for cat, samples in ds.categories.items():
        tr = sum(s.split == "train" for s in samples)
        te_a = sum(s.is_anomalous for s in samples)
        te_n = len(samples) - tr - te_a
        print(f"{cat:<10} {tr:>5} {te_n:>6} {te_a:>9} {bc.n_points:>7}")
    print(f"wrote {sum(len(v) for v in ds.categories.values())} clouds to {out}")
    return 0


def cmd_train(args, cfg: dict) -> int:
    mc = model_config(cfg)
    tc = train_config(cfg, mc)
    ds = load_dataset(args.data, splits=("train",))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out, _keys("model", "train"))
    every = max(1, cfg["train.log_every"])

    def progress(epoch, loss, lr):
        if (epoch + 1) % every == 0 or epoch == 0 or epoch + 1 == tc.epochs:
            print(f"{epoch + 1}, {loss:.6f}, {lr:g}", flush=True)

    try:
        train(ds, tc, out_dir=out, progress=progress)
    except T.DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"checkpoint: {out / 'checkpoint.bin'}")
    return 0


def heat_colors(scores: np.ndarray) -> np.ndarray:
    """Linear blue (0) to red (1) ramp as uint8 RGB."""
    s = np.clip(np.asarray(scores, dtype=np.float64), 0.0, 1.0)
    rgb = np.stack([s, np.zeros_like(s), 1.0 - s], axis=1)
    return np.round(rgb * 255).astype(np.uint8)


def cmd_detect(args, cfg: dict) -> int:
    model = load_checkpoint(args.checkpoint)
    cloud = load_cloud(args.input)
    norm_range = None
    if cfg["detect.norm"] == "calibrated":
        norm_range = model.extra.get("score_range")
        if norm_range is None:
            print("warning: checkpoint has no calibrated score range; normalising per sample", file=sys.stderr)
    res = score(cloud, model, norm_range)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out, _keys("detect"))
    save_ply(out / "heatmap.ply", cloud, binary=True, colors=heat_colors(res.point_scores))
    with open(out / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["point_index", "score", "label"])
        labels = cloud.labels
        for i, s in enumerate(res.point_scores):
            w.writerow([i, repr(float(s)), "" if labels is None else int(labels[i])])
    print(f"S_o = {res.object_score!r}")
    return 0


REPORT_DIGITS = 6


def round_report(report: dict) -> dict:
    """Round AUROC values so the printed table and the file agree digit for digit."""
    def r(block):
        return {k: (round(v, REPORT_DIGITS) if isinstance(v, float) else v) for k, v in block.items()}
    cats = {c: r(v) for c, v in report["categories"].items()}
    mean = {m: round(float(np.mean([v[m] for v in cats.values()])), REPORT_DIGITS) for m in ("o_auroc", "p_auroc")}
    out = dict(report, categories=cats, mean=mean)
    if "ablation" in report:
        out["ablation"] = {k: round_report(v) for k, v in report["ablation"].items()}
    return out


def format_table(report: dict) -> str:
    cats = sorted(report["categories"])
    width = max(10, *(len(c) for c in cats))
    head = f"{'metric':<10} " + " ".join(f"{c:>{width}}" for c in cats) + f" {'mean':>{width}}"
    lines = [head]
    rows = [("", report)] + [(f"{k} ", v) for k, v in sorted(report.get("ablation", {}).items())]
    for tag, rep in rows:
        for m, label in (("o_auroc", "O-AUROC"), ("p_auroc", "P-AUROC")):
            vals = [rep["categories"][c][m] for c in cats] + [rep["mean"][m]]
            name = f"{tag}{label}"
            lines.append(f"{name:<10} " + " ".join(f"{v:>{width}.{REPORT_DIGITS}f}" for v in vals))
    return "\n".join(lines)


def cmd_eval(args, cfg: dict) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out, _keys("eval", "train") if args.ablate else _keys("eval"))
    try:
        report = evaluate(ds, model, seed=cfg["seed"], norm=cfg["eval.norm"])
        if args.ablate == "no-agma":
            # same training recipe as the checkpoint, attention masking switched off
            stored = model.extra.get("train", {})
            tkw = {}
            for k in ("epochs", "lr", "lr_drop_epoch", "lr_drop_factor", "weight_decay", "lr_schedule"):
                explicit = f"train.{k}" in args.origins
                tkw[k] = cfg[f"train.{k}"] if explicit or k not in stored else stored[k]
            variant = ModelConfig(**{**model.config.__dict__, "use_agma": False})
            seed = stored.get("seed", cfg["seed"])
            ablated = train(ds, TrainConfig(seed=seed, model=variant, **tkw)).model
            sub = evaluate(ds, ablated, seed=cfg["seed"], norm=cfg["eval.norm"])
            report["ablation"] = {"no-agma": {"categories": sub["categories"], "mean": sub["mean"]}}
    except MetricError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_METRIC
    report = round_report(report)
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(format_table(report))
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

_TRAIN_FLAGS = {
    "epochs": ("train.epochs", int), "lr": ("train.lr", float),
    "lr-drop-epoch": ("train.lr_drop_epoch", int), "checkpoint-every": ("train.checkpoint_every", int),
    "lr-schedule": ("train.lr_schedule", _choice("step", "cosine")), "log-every": ("train.log_every", int),
    "rho": ("model.rho", float), "eta": ("model.eta", float), "alpha": ("model.alpha", float),
    "beta": ("model.beta", float), "gamma": ("model.gamma", float), "blocks": ("model.blocks", int),
    "channels": ("model.channels", int), "heads": ("model.heads", int), "groups": ("model.groups", int),
    "group-size": ("model.group_size", int),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="random seed (default 0)")
    common.add_argument("--config", help="settings file with 'section.key = value' lines")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="BLAS threads (default 1)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = argparse.ArgumentParser(prog="geomask", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate the synthetic benchmark")
    s.add_argument("--categories", help="comma separated shape kinds")
    s.add_argument("--n-points", type=int)

    t = sub.add_parser("train", parents=[common], help="train one model on every category")
    t.add_argument("--data", required=True, help="dataset root")
    for flag, (_, typ) in _TRAIN_FLAGS.items():
        t.add_argument(f"--{flag}", type=typ)
    t.add_argument("--no-agma", action="store_true", help="disable geometry-guided masking")

    d = sub.add_parser("detect", parents=[common], help="score one cloud and export a heatmap")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--input", required=True, help=".ply or .xyz point cloud")
    d.add_argument("--norm", choices=("calibrated", "sample"))

    e = sub.add_parser("eval", parents=[common], help="AUROC report over the test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--norm", choices=("dataset", "sample"))
    e.add_argument("--ablate", choices=("no-agma",), help="also retrain and score the unmasked variant")
    for flag in ("epochs", "lr", "lr-drop-epoch"):
        e.add_argument(f"--{flag}", type=_TRAIN_FLAGS[flag][1], help="training override for --ablate")
    return p


def _flags(args) -> dict:
    flags = {"seed": args.seed, "threads": args.threads}
    if args.command == "synth":
        flags["synth.categories"] = args.categories
        flags["synth.n_points"] = args.n_points
    elif args.command == "train":
        for flag, (key, _) in _TRAIN_FLAGS.items():
            flags[key] = getattr(args, flag.replace("-", "_"))
        if args.no_agma:
            flags["model.use_agma"] = False
    elif args.command == "detect":
        flags["detect.norm"] = args.norm
    elif args.command == "eval":
        flags["eval.norm"] = args.norm
        for flag in ("epochs", "lr", "lr-drop-epoch"):
            flags[_TRAIN_FLAGS[flag][0]] = getattr(args, flag.replace("-", "_"))
    return flags


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "detect": cmd_detect, "eval": cmd_eval}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.out is None:
        print("error: --out is required", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args.origins = {}
        cfg = resolve(args.config, _flags(args), origins=args.origins)
        if cfg["threads"] < 1:
            raise ConfigError("threads must be >= 1")
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=cfg["threads"]):
            return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (OSError, PlyError, XyzError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DegenerateInputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
