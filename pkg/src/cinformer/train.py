"""Loss, AdamW, learning-rate schedule, mIoU and the training loop."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config
from .errors import DataError, NumericError, StateError
from .model import forward, init_params
from .nn import ParamStore
from .rng import SeededRng

log = logging.getLogger(__name__)

_SHUFFLE_STREAM = 1 << 20
_INIT_STREAM = 0


# loss ----------------------------------------------------------------------

def cross_entropy(logits: Tensor, mask, ignore_index: int | None = None) -> Tensor:
    """Mean over non-ignored pixels of -log softmax(logits)[true class]."""
    x = logits.data
    mask = np.asarray(mask)
    b, k = x.shape[:2]
    if mask.shape != (b,) + x.shape[2:]:
        raise DataError(f"mask shape {mask.shape} does not match logits {x.shape}")
    valid = np.ones(mask.shape, dtype=bool) if ignore_index is None else mask != ignore_index
    bad = valid & ((mask < 0) | (mask >= k))
    if bad.any():
        where = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DataError(f"mask value {int(mask[where])} at pixel {where} outside [0, {k})")
    count = int(valid.sum())
    if count == 0:
        raise DataError("every pixel is ignored")
    target = np.where(valid, mask, 0)
    shifted = x - x.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    denom = expd.sum(axis=1, keepdims=True)
    logp = shifted - np.log(denom)
    picked = np.take_along_axis(logp, target[:, None], axis=1)[:, 0]
    loss = np.asarray(-(picked * valid).sum() / count, dtype=x.dtype)

    def backward(g):
        grad = expd / denom
        onehot = np.zeros_like(grad)
        np.put_along_axis(onehot, target[:, None], 1, axis=1)
        grad = (grad - onehot) * valid[:, None]
        return (grad * (g / count),)

    return ad._make(loss, (logits,), backward)


# optimizer -----------------------------------------------------------------

@dataclass
class AdamWState:
    """First/second moments aligned to ParamStore paths, plus the step counter."""
    PREFIX = "__adam__."

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_params(cls, params: ParamStore, weight_decay: float = 0.0, **kw) -> "AdamWState":
        m = {p: np.zeros_like(t.data) for p, t in params.items()}
        v = {p: np.zeros_like(t.data) for p, t in params.items()}
        return cls(m=m, v=v, weight_decay=weight_decay, **kw)

    def to_entries(self) -> dict:
        out = {f"{self.PREFIX}step": np.asarray(self.step, dtype=np.int64)}
        for p in sorted(self.m):
            out[f"{self.PREFIX}m.{p}"] = self.m[p]
        for p in sorted(self.v):
            out[f"{self.PREFIX}v.{p}"] = self.v[p]
        return out

    @classmethod
    def from_entries(cls, entries: dict, params: ParamStore, **kw) -> "AdamWState":
        pre = cls.PREFIX
        step = int(entries[f"{pre}step"])
        m = {k[len(pre) + 2:]: v for k, v in entries.items() if k.startswith(f"{pre}m.")}
        v = {k[len(pre) + 2:]: x for k, x in entries.items() if k.startswith(f"{pre}v.")}
        state = cls(m=m, v=v, step=step, **kw)
        state.check(params)
        return state

    def check(self, params: ParamStore) -> None:
        for p, t in params.items():
            if p not in self.m or p not in self.v:
                raise StateError(f"optimizer state has no moments for {p}")
            if self.m[p].shape != t.shape or self.v[p].shape != t.shape:
                raise StateError(f"optimizer moments for {p} have shape {self.m[p].shape}, "
                                 f"parameter has {t.shape}")


def adamw_step(params: ParamStore, state: AdamWState, lr: float) -> None:
    """Decoupled weight decay then a bias-corrected Adam step, in place."""
    state.check(params)
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    decay = lr * state.weight_decay
    for path, t in params.items():
        if not params.is_trainable(path):
            continue
        g = t.grad
        if g is None:
            raise StateError(f"no gradient for trainable parameter {path}")
        m, v = state.m[path], state.v[path]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        if decay:
            t.data -= decay * t.data
        t.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def lr_schedule(step: int, total_steps: int, warmup_steps: int, base_lr: float, min_lr: float) -> float:
    """Linear warmup from 0 to base_lr, then cosine decay to min_lr."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - warmup_steps
    progress = 1.0 if span <= 0 else min((step - warmup_steps) / span, 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


# metrics -------------------------------------------------------------------

@dataclass
class MetricReport:
    per_class_iou: np.ndarray   # NaN where the class has an empty union
    miou: float
    pixel_acc: float
    confusion: np.ndarray       # rows: ground truth, cols: prediction

    def to_json(self) -> dict:
        return {
            "miou": self.miou,
            "per_class_iou": [None if math.isnan(x) else float(x) for x in self.per_class_iou],
            "pixel_acc": self.pixel_acc,
        }


def confusion_matrix(pred, gt, num_classes: int) -> np.ndarray:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise DataError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise DataError(f"{name} values outside [0, {num_classes})")
    idx = gt.astype(np.int64).reshape(-1) * num_classes + pred.astype(np.int64).reshape(-1)
    return np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def report_from_confusion(cm: np.ndarray) -> MetricReport:
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    iou = np.full(cm.shape[0], np.nan)
    present = union > 0
    iou[present] = inter[present] / union[present]
    miou = float(iou[present].mean()) if present.any() else float("nan")
    total = cm.sum()
    acc = float(inter.sum() / total) if total else float("nan")
    return MetricReport(iou, miou, acc, cm)


def miou(pred, gt, num_classes: int) -> MetricReport:
    """mIoU over classes with a non-empty union; images accumulate in index order."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise DataError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    if pred.ndim <= 2:
        return report_from_confusion(confusion_matrix(pred, gt, num_classes))
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for i in range(pred.shape[0]):
        cm += confusion_matrix(pred[i], gt[i], num_classes)
    return report_from_confusion(cm)


def evaluate(params: ParamStore, config: Config, images, masks, batch: int | None = None) -> MetricReport:
    k = config.model.num_classes
    batch = batch or config.train.batch
    cm = np.zeros((k, k), dtype=np.int64)
    with no_grad():
        for start in range(0, len(images), batch):
            logits = forward(params, images[start:start + batch], config)
            pred = np.argmax(logits.data, axis=1)
            for i in range(pred.shape[0]):
                cm += confusion_matrix(pred[i], masks[start + i], k)
    return report_from_confusion(cm)


# training ------------------------------------------------------------------

class _BatchSampler:
    """Seeded epoch permutations, consumed as one continuous stream."""

    def __init__(self, n: int, batch: int, seed: int):
        self.n, self.batch = n, batch
        self.root = SeededRng(seed).derive(_SHUFFLE_STREAM)
        self._perms: dict[int, np.ndarray] = {}

    def _perm(self, epoch: int) -> np.ndarray:
        if epoch not in self._perms:
            self._perms[epoch] = self.root.derive(epoch).permutation(self.n)
        return self._perms[epoch]

    def indexes(self, step: int) -> np.ndarray:
        pos = np.arange(step * self.batch, (step + 1) * self.batch)
        return np.array([self._perm(int(q) // self.n)[int(q) % self.n] for q in pos])


def _read_metrics(path: Path, upto: int) -> list[str]:
    if not path.exists():
        return []
    keep = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip() and json.loads(line)["step"] <= upto:
            keep.append(line)
    return keep


def train_loop(config: Config, images, masks, out_dir=None, eval_images=None, eval_masks=None,
               resume=None, stop_after: int | None = None) -> dict:
    """Train from scratch (or ``resume`` checkpoint path) and return the final state.

    Writes ``last.ckpt``, ``best.ckpt`` and ``metrics.jsonl`` under ``out_dir``
    when given.  ``stop_after`` ends the run early at that step count without
    changing the learning-rate schedule (an interruption).
    """
    images = np.asarray(images, dtype=np.float32)
    masks = np.asarray(masks)
    if len(images) == 0:
        raise DataError("training set is empty")
    if eval_images is None or len(eval_images) == 0:
        eval_images, eval_masks = images, masks
    tc = config.train
    total = tc.steps
    warmup = int(round(tc.warmup_frac * total))
    min_lr = tc.lr * tc.min_lr_frac
    out = Path(out_dir) if out_dir is not None else None
    best = -1.0
    if resume is not None:
        params, state, ck_config, extra = load_checkpoint(resume)
        if ck_config.to_json() != config.to_json():
            log.warning("resuming with the configuration stored in %s", resume)
            config = ck_config
        if state is None:
            raise StateError(f"{resume} holds no optimizer state")
        state.weight_decay = config.train.weight_decay
        best = float(extra.get("__train__.best_miou", -1.0))
    else:
        params = init_params(config, SeededRng(tc.seed).derive(_INIT_STREAM))
        state = AdamWState.for_params(params, weight_decay=tc.weight_decay)
    start = state.step
    lines = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        lines = _read_metrics(out / "metrics.jsonl", start) if resume is not None else []
        (out / "metrics.jsonl").write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    sampler = _BatchSampler(len(images), tc.batch, tc.seed)
    history = []
    end = total if stop_after is None else min(total, stop_after)
    report = None

    def save(name):
        if out is not None:
            save_checkpoint(out / name, params, state, config,
                            {"__train__.best_miou": np.asarray(best, dtype=np.float64)})

    for step in range(start, end):
        idx = sampler.indexes(step)
        lr = lr_schedule(step + 1, total, warmup, tc.lr, min_lr)
        params.zero_grad()
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                logits = forward(params, images[idx], config)
                loss = cross_entropy(logits, masks[idx])
        except NumericError as exc:
            raise NumericError(f"{exc} at step {step + 1}") from exc
        loss_value = float(loss.data)
        if not math.isfinite(loss_value):
            raise NumericError(f"non-finite loss at step {step + 1}")
        loss.backward()
        adamw_step(params, state, lr)
        record = {"step": step + 1, "lr": lr, "loss": loss_value}
        is_eval = (step + 1) % tc.eval_every == 0 or step + 1 == total
        if is_eval:
            report = evaluate(params, config, eval_images, eval_masks)
            record.update(report.to_json())
            record.pop("pixel_acc")
            log.info("step %d loss %.4f miou %.4f", step + 1, loss_value, report.miou)
            improved = report.miou > best
            if improved:
                best = report.miou
            save("last.ckpt")
            if improved:
                save("best.ckpt")
        history.append(record)
        if out is not None:
            with open(out / "metrics.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
    if out is not None and (end == start or not history or "miou" not in history[-1]):
        save("last.ckpt")
    return {"params": params, "state": state, "config": config, "history": history,
            "best_miou": best, "report": report}
