"""Two-stage transfer learning: base training, few-shot sampling, novel fine-tuning."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .classspace import ClassSpace, remap_for_stage
from .errors import DivergedLoss, InsufficientScans
from .losses import base_stage_loss, class_weights, label_counts, novel_stage_loss, softmax
from .lora import STRATEGIES, apply_strategy, quarter_rank
from .metrics import ConfusionMatrix, splits
from .network import SegmentationModel
from .pointcloud import LidarScan, back_project, spherical_project

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 4
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    strategy: str = "lora"
    lambda_kd: float = 1.0
    shots: int = 2
    min_scan_gap: int = 100
    loss: str = "unbiased"          # "unbiased" | "plain"
    distill_mode: str = "sum"       # "sum" | "label"
    lovasz: bool = True
    rank_div: int = 4
    rank_hidden: str = "min"        # "min" -> min(d, k), "width" -> output channels
    train_wrapped_bias: bool = True
    novel_init_scale: float = 0.01
    widths: tuple[int, int, int] = (16, 32, 64)
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.shots < 1 or self.min_scan_gap < 0:
            raise ValueError("epochs, batch_size and shots must be >= 1 and min_scan_gap >= 0")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.loss not in ("unbiased", "plain"):
            raise ValueError("loss must be 'unbiased' or 'plain'")
        self.widths = tuple(int(w) for w in self.widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


# full-scale schedule from the SemanticKITTI experiments
FULL_SCALE_PRESET = dict(epochs=160, batch_size=14, min_scan_gap=250)


def baseline_config(name: str, **overrides) -> tuple[TrainConfig, int]:
    """TrainConfig plus the number of tracked frames for a named method.

    ``freeze`` / ``dynamic`` fine-tune on the shots alone with plain CE;
    ``lwf`` adds plain distillation; ``ubloss`` uses the unbiased losses;
    ``tracked-lora`` adds tracking augmentation and low-rank adapters.
    """
    table = {
        "freeze": (dict(strategy="freeze", loss="plain", lambda_kd=0.0), 0),
        "dynamic": (dict(strategy="dynamic", loss="plain", lambda_kd=0.0), 0),
        "lwf": (dict(strategy="dynamic", loss="plain", lambda_kd=1.0), 0),
        "ubloss": (dict(strategy="dynamic", loss="unbiased", lambda_kd=1.0), 0),
        "tracked-lora": (dict(strategy="lora", loss="unbiased", lambda_kd=1.0), 20),
    }
    if name not in table:
        raise KeyError(f"unknown baseline {name!r}; choose from {sorted(table)}")
    kw, frames = table[name]
    return TrainConfig(**{**kw, **overrides}), frames


# --------------------------------------------------------------------------
# samples

@dataclass
class Sample:
    features: np.ndarray   # (H, W, 5)
    labels: np.ndarray     # (H, W) dense class ids of representative points
    valid: np.ndarray      # (H, W) bool


def make_sample(scan: LidarScan, point_labels, projection: dict) -> Sample:
    ri = spherical_project(scan, projection["height"], projection["width"],
                           projection["fov_up"], projection["fov_down"])
    return Sample(ri.features.astype(np.float32), ri.pixel_labels(np.asarray(point_labels)), ri.valid)


def feature_scale(samples: Sequence[Sample]) -> np.ndarray:
    """Per-channel 1/std over occupied pixels."""
    feats = np.concatenate([s.features[s.valid] for s in samples])
    std = feats.std(axis=0)
    return (1.0 / np.where(std > 1e-6, std, 1.0)).astype(np.float64)


def _stack(samples: Sequence[Sample], idx):
    x = np.stack([samples[i].features for i in idx])
    y = np.stack([samples[i].labels for i in idx])
    v = np.stack([samples[i].valid for i in idx])
    return x, y, v


class MomentumSGD:
    def __init__(self, params: dict, lr: float, momentum: float):
        self.params, self.lr, self.momentum = params, lr, momentum
        self.velocity = {n: np.zeros_like(p.value) for n, p in params.items()}

    def step(self) -> None:
        for n, p in self.params.items():
            if p.frozen:
                continue
            v = self.velocity[n]
            v *= self.momentum
            v += p.grad
            p.value -= (self.lr * v).astype(p.value.dtype)


def _run_epochs(model: SegmentationModel, samples, cfg: TrainConfig, loss_fn, extra=None,
                on_step=None, on_epoch=None) -> list[dict]:
    rng = np.random.default_rng(cfg.seed)
    opt = MomentumSGD(model.parameters(), cfg.learning_rate, cfg.momentum)
    history = []
    n = len(samples)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        totals, count = {}, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x, y, v = _stack(samples, idx)
            if not v.any():
                continue
            model.zero_grad()
            logits = model.forward(x)
            rows = logits[v].astype(np.float64)
            if not np.isfinite(rows).all():
                raise DivergedLoss(f"non-finite logits at epoch {epoch + 1}")
            lv = loss_fn(rows, y[v], None if extra is None else extra(idx, v))
            if not np.isfinite(lv.value):
                raise DivergedLoss(f"loss became {lv.value} at epoch {epoch + 1}")
            grad = np.zeros(logits.shape, dtype=model.dtype)
            grad[v] = lv.grad
            model.backward(grad)
            if on_step is not None:
                on_step(model)
            opt.step()
            for k, val in lv.parts.items():
                if isinstance(val, float):
                    totals[k] = totals.get(k, 0.0) + val
            totals["loss"] = totals.get("loss", 0.0) + lv.value
            count += 1
        row = {"epoch": epoch + 1, **{k: t / max(count, 1) for k, t in totals.items()}}
        history.append(row)
        if on_epoch is not None:
            on_epoch(epoch + 1, model)
        log.debug("epoch %d loss %.5f", epoch + 1, row.get("loss", float("nan")))
    return history


# --------------------------------------------------------------------------
# stages

def base_train(scans: Sequence[LidarScan], labels: Sequence[np.ndarray], cs: ClassSpace, cfg: TrainConfig,
               projection: dict, model: SegmentationModel | None = None, on_epoch=None):
    """Train the base model on base-stage labels; returns (model, per-epoch history)."""
    labels = [remap_for_stage(lab, "base", cs) for lab in labels]
    samples = [make_sample(s, lab, projection) for s, lab in zip(scans, labels)]
    if model is None:
        model = SegmentationModel(5, cfg.widths, cs.num_base_outputs, cfg.seed, np.dtype(cfg.dtype), projection)
        model.input_scale = feature_scale(samples).astype(model.dtype)
    weights = class_weights(label_counts(labels, cs.num_base_outputs))
    history = _run_epochs(model, samples, cfg, lambda z, y, _: base_stage_loss(z, y, weights),
                          on_epoch=on_epoch)
    return model, history


def teacher_probs(teacher: SegmentationModel, samples: Sequence[Sample], batch: int = 8) -> list[np.ndarray]:
    out = []
    for start in range(0, len(samples), batch):
        x = np.stack([s.features for s in samples[start:start + batch]])
        logits = teacher.forward(x)[..., :teacher.n_base].astype(np.float64)
        out.extend(softmax(logits))
    return out


def prepare_finetune_model(base_model: SegmentationModel, cs: ClassSpace, cfg: TrainConfig) -> SegmentationModel:
    model = base_model.copy()
    model.attach_novel_head(len(cs.novel), cfg.novel_init_scale, seed=cfg.seed + 1)
    for p in model.parameters().values():
        p.frozen = False

    def rank_rule(d, k):
        return quarter_rank(d, k, cfg.rank_div, cfg.rank_hidden)

    apply_strategy(model, cfg.strategy, rank_rule=rank_rule, train_wrapped_bias=cfg.train_wrapped_bias,
                   seed=cfg.seed + 2)
    return model


def novel_finetune(base_model: SegmentationModel, entries, cs: ClassSpace, cfg: TrainConfig, on_step=None,
                   on_epoch=None):
    """Fine-tune on (scan, novel-stage labels) pairs; returns (model, per-epoch history).

    ``entries`` may be an :class:`~fslidar.tracker.AugmentedDataset` or any
    sequence of objects with ``scan`` and ``labels`` attributes.
    """
    entries = list(getattr(entries, "entries", entries))
    model = prepare_finetune_model(base_model, cs, cfg)
    samples = [make_sample(e.scan, e.labels, model.projection) for e in entries]
    teacher = base_model.copy()
    t_probs = teacher_probs(teacher, samples)

    def extra(idx, v):
        return np.stack([t_probs[i] for i in idx])[v]

    def loss_fn(z, y, t):
        return novel_stage_loss(z, y, t, cs, cfg.lambda_kd, cfg.distill_mode,
                                unbiased=cfg.loss == "unbiased", lovasz=cfg.lovasz)

    history = _run_epochs(model, samples, cfg, loss_fn, extra, on_step, on_epoch)
    return model, history


# --------------------------------------------------------------------------
# few-shot sampling

def sample_few_shot(frame_labels: dict, m: int, min_scan_gap: int, cs: ClassSpace, seed: int,
                    min_points: int = 1) -> list[tuple[str, int]]:
    """Pick ``m`` scans per novel class, pairwise ``min_scan_gap`` apart within a sequence.

    ``frame_labels`` maps sequence id to ``{frame_index: dense labels}``.
    Scans already chosen for an earlier class count toward every class they contain.
    """
    rng = np.random.default_rng(seed)
    chosen: list[tuple[str, int]] = []
    contains = {}
    for seq, frames in frame_labels.items():
        for f, lab in frames.items():
            counts = np.bincount(np.asarray(lab, dtype=np.int64), minlength=cs.num_classes)
            contains[(seq, f)] = {int(c) for c in cs.novel_dense if counts[c] >= min_points}
    keys = sorted(contains)

    def admissible(key):
        return all(s != key[0] or abs(f - key[1]) >= min_scan_gap for s, f in chosen)

    for c in cs.novel_dense:
        have = sum(1 for k in chosen if c in contains[k])
        candidates = [k for k in keys if c in contains[k] and k not in chosen]
        for i in rng.permutation(len(candidates)):
            if have >= m:
                break
            if admissible(candidates[i]):
                chosen.append(candidates[i])
                have += 1
        if have < m:
            raise InsufficientScans(f"only {have} admissible scans contain class {cs.dense_names()[c]}, need {m}")
    return chosen


# --------------------------------------------------------------------------
# evaluation

def predict_scans(model: SegmentationModel, scans: Sequence[LidarScan], batch: int = 8) -> list[np.ndarray]:
    p = model.projection
    out = []
    for start in range(0, len(scans), batch):
        ris = [spherical_project(s, p["height"], p["width"], p["fov_up"], p["fov_down"])
               for s in scans[start:start + batch]]
        pix = np.argmax(model.forward(np.stack([r.features for r in ris])), axis=-1)
        out.extend(back_project(px, r) for px, r in zip(pix, ris))
    return out


def evaluate(model: SegmentationModel, scans, labels, cs: ClassSpace) -> tuple[ConfusionMatrix, dict]:
    cm = ConfusionMatrix(cs.num_classes)
    for pred, gt in zip(predict_scans(model, scans), labels):
        cm.accumulate(gt, pred)
    return cm, splits(cm, cs)
