"""Canonicalisation, multi-category training, anomaly scoring and AUROC evaluation."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import rankdata

from . import tensor as T
from .geometry import DegenerateInputError, PointCloud, geometry_profile
from .model import (Model, ModelConfig, forward, init_params, save_checkpoint, trainable)
from .tokenizer import encode_groups, knn_group, relative_groups

log = logging.getLogger(__name__)


class MetricError(ValueError):
    """AUROC is undefined (only one class present)."""


# ---------------------------------------------------------------------------
# canonical frame
# ---------------------------------------------------------------------------

def canonical_transform(points: np.ndarray, skew_tol: float = 1e-12):
    """Return ``(mean, rotation, scale)`` with ``canonical = (p - mean) @ rotation / scale``.

    Axes are principal directions in descending variance.  Each axis is signed
    so the third moment along it is positive; when that moment vanishes the
    first two axes keep their eigenvector sign with the largest component made
    positive, and the third axis completes a right-handed frame.
    """
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 3:
        raise DegenerateInputError("canonicalisation needs at least three points")
    mean = pts.mean(axis=0)
    X = pts - mean
    lam, vec = np.linalg.eigh(X.T @ X / len(X))
    lam, vec = lam[::-1], vec[:, ::-1].copy()
    if lam[0] <= 0 or lam[1] <= 1e-12 * lam[0]:
        raise DegenerateInputError("point cloud is collinear or a single point")
    Y = X @ vec
    radius = np.sqrt((X ** 2).sum(axis=1)).max()
    resolved = []
    for a in range(3):
        m3 = np.mean(Y[:, a] ** 3)
        if abs(m3) > skew_tol * radius ** 3:
            if m3 < 0:
                vec[:, a] *= -1
            resolved.append(True)
        else:
            if vec[np.argmax(np.abs(vec[:, a])), a] < 0:
                vec[:, a] *= -1
            resolved.append(False)
    if not resolved[2]:
        vec[:, 2] = np.cross(vec[:, 0], vec[:, 1])
    return mean, vec, radius


def canonicalize(cloud: PointCloud) -> PointCloud:
    """Centre on the centroid, rotate into principal axes, scale max radius to 1."""
    mean, rot, scale = canonical_transform(cloud.points)
    return PointCloud((cloud.points - mean) @ rot / scale, cloud.labels, cloud.category)


# ---------------------------------------------------------------------------
# per-cloud preprocessing
# ---------------------------------------------------------------------------

@dataclass
class PreparedCloud:
    points: np.ndarray          # canonical coordinates
    center_indices: np.ndarray
    groups: np.ndarray
    rel: np.ndarray
    centers: np.ndarray
    var_geom: np.ndarray
    radius: float
    tokens: T.Tensor | None = None
    source: str = ""


def prepare(cloud: PointCloud, cfg: ModelConfig, params: dict | None = None, source: str = "") -> PreparedCloud:
    """Canonicalise, sample centres, group, and compute geometric variation.

    When the group encoder is frozen and ``params`` is given, the clean tokens
    are computed once here.
    """
    pts = canonicalize(cloud).points
    g = min(cfg.groups, len(pts))
    prof = geometry_profile(pts, g, cfg.eta, cfg.alpha, cfg.beta)
    groups = knn_group(pts, prof.center_indices, min(cfg.group_size, len(pts)))
    rel = relative_groups(pts, groups, prof.center_indices)
    prep = PreparedCloud(pts, prof.center_indices, groups, rel, pts[prof.center_indices],
                         prof.var_geom, prof.radius, source=source)
    if params is not None and not cfg.train_encoder:
        prep.tokens = encode_groups(rel, params).detach()
    return prep


def _forward(model: Model, prep: PreparedCloud, **kw):
    return forward(model.params, model.config, prep.rel, prep.centers, prep.var_geom,
                   tokens=prep.tokens, **kw)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 1000
    lr: float = 1e-4
    lr_drop_epoch: int = 800
    lr_drop_factor: float = 0.1
    batch_size: int = 1
    weight_decay: float = 1e-2
    seed: int = 0
    checkpoint_every: int = 0
    lr_schedule: str = "step"
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.lr_schedule not in ("step", "cosine"):
            raise ValueError(f"lr_schedule must be 'step' or 'cosine', got {self.lr_schedule!r}")
        if self.batch_size != 1:
            raise ValueError("only batch_size = 1 is supported")


def lr_at_epoch(epoch: int, base: float = 1e-4, drop_epoch: int = 800, factor: float = 0.1) -> float:
    """Step schedule: ``base`` for epochs [0, drop_epoch), then ``base * factor``."""
    return base if epoch < drop_epoch else base * factor


def cosine_lr(epoch: int, base: float, epochs: int) -> float:
    """Half-cosine from ``base`` at epoch 0 toward 0 at ``epochs``."""
    return base * 0.5 * (1.0 + np.cos(np.pi * epoch / epochs))


@dataclass
class LossRecord:
    step: int
    epoch: int
    loss: float
    lr: float


@dataclass
class TrainResult:
    model: Model
    optimizer: T.AdamW
    losses: list[LossRecord]


def _rng_streams(seed: int):
    ss = np.random.SeedSequence(seed)
    init, shuffle, mask, jitter = ss.spawn(4)
    return (np.random.default_rng(init), np.random.default_rng(shuffle),
            np.random.default_rng(mask), np.random.default_rng(jitter))


def training_clouds(dataset) -> list[tuple[str, PointCloud]]:
    """Flatten a Dataset (or ``{category: [clouds]}``) into (source, cloud) pairs,
    categories in sorted order."""
    cats = dataset.categories if hasattr(dataset, "categories") else dataset
    out = []
    for cat in sorted(cats):
        for i, s in enumerate(cats[cat]):
            if hasattr(s, "split"):
                if s.split != "train":
                    continue
                if s.is_anomalous:
                    raise ValueError(f"training sample {s.source} is anomalous")
                out.append((s.source or f"{cat}/{i}", s.cloud))
            else:
                out.append((f"{cat}/{i}", s))
    if not out:
        raise ValueError("no training samples")
    return out


def train(dataset, config: TrainConfig, out_dir=None,
          progress: Callable[[int, float, float], None] | None = None,
          on_epoch: Callable[[int, Model], None] | None = None) -> TrainResult:
    """Train one model on the normal samples of every category.

    Each step: mask plan + jitter on one cached cloud, encoder, decoder, loss
    against the clean tokens, backward, AdamW.  Writes ``loss.csv`` and
    ``checkpoint.bin`` into ``out_dir`` when given.
    """
    cfg = config.model
    init_rng, shuffle_rng, mask_rng, jitter_rng = _rng_streams(config.seed)
    params = init_params(cfg, init_rng)
    model = Model(cfg, params, {})
    clouds = training_clouds(dataset)
    prepared = [prepare(c, cfg, params, source=src) for src, c in clouds]
    opt = T.AdamW(trainable(params), lr=config.lr, weight_decay=config.weight_decay)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    records: list[LossRecord] = []
    step = 0
    for epoch in range(config.epochs):
        if config.lr_schedule == "cosine":
            opt.lr = cosine_lr(epoch, config.lr, config.epochs)
        else:
            opt.lr = lr_at_epoch(epoch, config.lr, config.lr_drop_epoch, config.lr_drop_factor)
        order = shuffle_rng.permutation(len(prepared))
        epoch_losses = []
        for i in order:
            prep = prepared[i]
            try:
                # overflow surfaces below as a non-finite value; numpy's warnings would only duplicate it
                with np.errstate(over="ignore", invalid="ignore"):
                    res = _forward(model, prep, train=True, mask_rng=mask_rng, jitter_rng=jitter_rng)
                    loss = res.loss.item()
                    if not np.isfinite(loss):
                        raise T.NonFiniteError("loss is not finite")
                    opt.zero_grad()
                    T.backward(res.loss)
                    opt.step()
            except (T.NonFiniteError, T.DivergenceError) as exc:
                raise T.DivergenceError(f"training diverged at step {step} (epoch {epoch}, "
                                        f"sample {prep.source}): {exc}") from exc
            records.append(LossRecord(step, epoch, loss, opt.lr))
            epoch_losses.append(loss)
            step += 1
        mean_loss = float(np.mean(epoch_losses))
        if progress is not None:
            progress(epoch, mean_loss, opt.lr)
        log.debug("epoch %d loss %.6f lr %g", epoch, mean_loss, opt.lr)
        if on_epoch is not None:
            on_epoch(epoch, model)
        if out is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            save_checkpoint(out / f"checkpoint_epoch{epoch + 1:04d}.bin", model, opt)

    errs = np.concatenate([_forward(model, p).token_errors() for p in prepared])
    model.extra = {"score_range": [float(errs.min()), float(errs.max())],
                   "train": {k: v for k, v in asdict(config).items() if k != "model"},
                   "steps": step}
    if out is not None:
        save_checkpoint(out / "checkpoint.bin", model, opt)
        write_loss_csv(out / "loss.csv", records)
    return TrainResult(model, opt, records)


def write_loss_csv(path, records: Iterable[LossRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "epoch", "loss", "lr"])
        for r in records:
            w.writerow([r.step, r.epoch, repr(r.loss), repr(r.lr)])


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

@dataclass
class AnomalyResult:
    point_scores: np.ndarray
    object_score: float
    token_errors: np.ndarray
    category: str | None = None
    token_scores: np.ndarray | None = None
    groups: np.ndarray | None = None


def min_max(values: np.ndarray, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    """Scale to [0, 1] with the given (or observed) range; a zero range maps to zeros."""
    values = np.asarray(values, dtype=np.float64)
    lo = values.min() if lo is None else lo
    hi = values.max() if hi is None else hi
    if hi <= lo:
        return np.zeros_like(values)
    return np.clip((values - lo) / (hi - lo), 0.0, 1.0)


def point_scores_from_tokens(token_scores: np.ndarray, groups: np.ndarray, n: int,
                             points: np.ndarray | None = None,
                             centers: np.ndarray | None = None) -> np.ndarray:
    """Average the scores of every group containing a point.

    Points outside all groups take the score of the nearest group centre
    (needs ``points`` and ``centers``; otherwise they score 0).
    """
    token_scores = np.asarray(token_scores, dtype=np.float64)
    groups = np.asarray(groups)
    k = groups.shape[1]
    flat = groups.ravel()
    sums = np.bincount(flat, weights=np.repeat(token_scores, k), minlength=n)
    counts = np.bincount(flat, minlength=n)
    out = np.zeros(n)
    covered = counts > 0
    out[covered] = sums[covered] / counts[covered]
    if not covered.all() and points is not None and centers is not None:
        _, nearest = cKDTree(centers).query(points[~covered])
        out[~covered] = token_scores[nearest]
    return np.clip(out, 0.0, 1.0)


def token_errors(model: Model, prep: PreparedCloud) -> np.ndarray:
    return _forward(model, prep).token_errors()


def result_from_errors(errors: np.ndarray, prep: PreparedCloud, norm_range=None,
                       category: str | None = None) -> AnomalyResult:
    lo, hi = (None, None) if norm_range is None else norm_range
    tok = min_max(errors, lo, hi)
    ps = point_scores_from_tokens(tok, prep.groups, len(prep.points), prep.points, prep.centers)
    return AnomalyResult(ps, float(ps.max()), errors, category, tok, prep.groups)


def score(cloud: PointCloud, model: Model, norm_range=None) -> AnomalyResult:
    """Eval-mode anomaly scores for one cloud.

    Token errors are min-max normalised over this cloud unless ``norm_range``
    = (lo, hi) is supplied, in which case that fixed range is used (clipped).
    """
    prep = prepare(cloud, model.config, model.params)
    return result_from_errors(token_errors(model, prep), prep, norm_range, cloud.category)


# ---------------------------------------------------------------------------
# metrics and evaluation
# ---------------------------------------------------------------------------

def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied positive/negative pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs both positive and negative labels")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def run_id(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha1(blob).hexdigest()[:12]


def evaluate(dataset, model: Model, seed: int = 0, norm: str = "dataset") -> dict:
    """Per-category and mean object/point AUROC over the test split.

    ``norm="dataset"`` min-max normalises token errors with one range shared
    by every test cloud; ``norm="sample"`` normalises each cloud on its own.
    """
    cats = dataset.split("test") if hasattr(dataset, "split") else dataset
    items = []
    for cat in sorted(cats):
        for s in cats[cat]:
            prep = prepare(s.cloud, model.config, model.params, source=s.source)
            items.append((cat, s, prep, token_errors(model, prep)))
    if not items:
        raise ValueError("no test samples")
    if norm == "dataset":
        allerr = np.concatenate([e for *_, e in items])
        rng_ = (float(allerr.min()), float(allerr.max()))
    elif norm == "sample":
        rng_ = None
    else:
        raise ValueError(f"unknown normalisation {norm!r}")

    scored = [(cat, s, result_from_errors(err, prep, rng_, cat)) for cat, s, prep, err in items]
    config = {"model": asdict(model.config), "norm": norm}
    report = summarize(scored)
    report.update({"config": config, "seed": seed,
                   "run_id": run_id({"config": config, "seed": seed, "extra": model.extra})})
    return report


def summarize(scored: Iterable[tuple[str, object, AnomalyResult]]) -> dict:
    """Per-category and mean AUROC from ``(category, sample, result)`` triples."""
    acc: dict[str, dict[str, list]] = {}
    for cat, s, res in scored:
        a = acc.setdefault(cat, {"obj": [], "obj_lab": [], "pt": [], "pt_lab": []})
        a["obj"].append(res.object_score)
        a["obj_lab"].append(s.is_anomalous)
        a["pt"].append(res.point_scores)
        mask = s.anomaly_mask if s.anomaly_mask is not None else np.zeros(len(s.cloud), bool)
        a["pt_lab"].append(mask)
    per_cat: dict[str, dict] = {}
    for cat in sorted(acc):
        a = acc[cat]
        try:
            o = auroc(a["obj"], a["obj_lab"])
            p = auroc(np.concatenate(a["pt"]), np.concatenate(a["pt_lab"]))
        except MetricError as exc:
            raise MetricError(f"category {cat!r}: {exc}") from exc
        per_cat[cat] = {"o_auroc": o, "p_auroc": p, "n_samples": len(a["obj"]),
                        "n_points": int(sum(len(x) for x in a["pt"]))}
    mean = {"o_auroc": float(np.mean([v["o_auroc"] for v in per_cat.values()])),
            "p_auroc": float(np.mean([v["p_auroc"] for v in per_cat.values()]))}
    return {"categories": per_cat, "mean": mean}


def write_report(path, report: dict) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
