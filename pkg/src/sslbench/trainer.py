"""Fine-tuning and pretraining loops with plateau schedule and gated checkpoints."""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import augment as aug
from . import metrics as M
from .data_ingest import ClassWeights, DatasetManifest, ImageSample, SplitManifest, load_image, load_target
from .encoders import ViTEncoder, save_checkpoint, state_digest
from .ssl_losses import SSLConfig
from .ssl_models import MAE, build_pretrainer
from .task_heads import dice_loss, ssi_align, ssi_mse_loss, weighted_cross_entropy

log = logging.getLogger(__name__)

VALIDATION_METRIC = {
    "classification": ("mF1", "max"),
    "segmentation": ("mDice", "max"),
    "depth": ("mSSI-MSE", "min"),
}


class TrainingError(RuntimeError):
    def __init__(self, msg: str, snapshot: dict[str, Any]):
        super().__init__(msg)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    batch_size: int = 48
    lr: float = 1e-4
    patience: int = 10
    lr_floor: float = 1e-6
    epochs: int = 50
    seed: int = 0
    weight_decay: float = 1e-4
    grad_weight: float = 0.5
    grad_scales: int = 4

    @classmethod
    def full_scale_defaults(cls, task: str) -> "TrainConfig":
        return cls(epochs=200 if task == "segmentation" else 50)

    @classmethod
    def desk_defaults(cls, task: str) -> "TrainConfig":
        return cls(batch_size=12, epochs=20, lr=1e-3)


@dataclass
class RunRecord:
    train_loss: list[float] = field(default_factory=list)
    val_score: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_score: float | None = None
    checkpoint_id: str | None = None
    config_hash: str | None = None
    wall_clock: float = 0.0

    def to_json(self) -> dict[str, Any]:
        return asdict(self)


# --------------------------------------------------------------------------
# schedule


def lr_schedule_step(stale: int, rate: float, patience: int = 10, floor: float = 1e-6) -> tuple[float, int]:
    """Halve ``rate`` once ``stale`` epochs pass without improvement, clamped at ``floor``.

    Returns the new rate and the (possibly reset) stale counter.
    """
    if stale >= patience:
        return max(rate / 2.0, floor), 0
    return rate, stale


def improved(score: float, best: float | None, direction: str) -> bool:
    if best is None:
        return math.isfinite(score)
    return score > best if direction == "max" else score < best


# --------------------------------------------------------------------------
# data


def _seed_for(seed: int, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, *keys])


def prepare_sample(
    manifest: DatasetManifest,
    rec: ImageSample,
    task: str,
    cfg: aug.AugmentConfig,
    seed: np.random.SeedSequence | None,
) -> tuple[np.ndarray, dict[str, Any]]:
    """Augmented (``seed`` given) or eval-processed image plus mirrored target."""
    img = load_image(manifest, rec)
    tgt = load_target(manifest, rec)
    if seed is None:
        x, tr = aug.preprocess_eval(img, task, cfg)
    else:
        x, tr = aug.preprocess_train(img, task, seed, cfg)
    out: dict[str, Any] = {}
    if task == "classification":
        out["label"] = tgt["label"]
    elif task == "segmentation":
        out["mask"] = aug.apply_to_targets(tr, tgt["mask"], "mask")
    elif task == "depth":
        out["depth"] = aug.apply_to_targets(tr, tgt["depth"], "depth")
        out["lens"] = aug.apply_to_targets(tr, tgt["lens"].astype(np.uint8), "mask").astype(bool)
    return x, out


def collate(items: Sequence[tuple[np.ndarray, dict[str, Any]]], task: str) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    x = torch.from_numpy(np.stack([i[0] for i in items]).transpose(0, 3, 1, 2).copy()).float()
    t: dict[str, torch.Tensor] = {}
    if task == "classification":
        t["label"] = torch.tensor([i[1]["label"] for i in items], dtype=torch.long)
    elif task == "segmentation":
        t["mask"] = torch.from_numpy(np.stack([i[1]["mask"] for i in items]).astype(np.float32))
    elif task == "depth":
        t["depth"] = torch.from_numpy(np.stack([i[1]["depth"] for i in items]).astype(np.float32))
        t["lens"] = torch.from_numpy(np.stack([i[1]["lens"] for i in items]))
    return x, t


def _batches(n: int, batch_size: int, order: np.ndarray) -> list[np.ndarray]:
    out = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # batch norm cannot train on a single sample
    if len(out) > 1 and len(out[-1]) == 1:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


# --------------------------------------------------------------------------
# task losses and validation


def task_loss(model: nn.Module, x: torch.Tensor, t: dict[str, torch.Tensor], task: str, cfg: TrainConfig, weights) -> torch.Tensor:
    out = model(x)
    if task == "classification":
        return weighted_cross_entropy(out, t["label"], weights)
    if task == "segmentation":
        return dice_loss(torch.sigmoid(out), t["mask"])
    if task == "depth":
        return ssi_mse_loss(torch.sigmoid(out), t["depth"], t["lens"], cfg.grad_weight, cfg.grad_scales)
    raise ValueError(f"unsupported task {task!r}")


@torch.no_grad()
def predict(model: nn.Module, manifest: DatasetManifest, records: Sequence[ImageSample], task: str, acfg: aug.AugmentConfig, batch_size: int = 32):
    """Eval-mode forward over ``records``; yields network-scale outputs and prepared targets."""
    model.eval()
    outs, targets = [], []
    for i in range(0, len(records), batch_size):
        items = [prepare_sample(manifest, r, task, acfg, None) for r in records[i : i + batch_size]]
        x, t = collate(items, task)
        y = model(x)
        if task != "classification":
            y = torch.sigmoid(y)
        outs.append(y)
        targets.append(t)
    return outs, targets


def validation_score(model, manifest, records, task, acfg) -> float:
    outs, targets = predict(model, manifest, records, task, acfg)
    if task == "classification":
        pred = torch.cat(outs).argmax(1).numpy()
        true = torch.cat([t["label"] for t in targets]).numpy()
        n_c = outs[0].shape[1]
        return M.classification_metrics(M.ConfusionCounts.from_labels(pred, true, n_c))["mF1"]
    if task == "segmentation":
        probs = torch.cat(outs).numpy()
        masks = torch.cat([t["mask"] for t in targets]).numpy()
        return float(M.segmentation_metrics(list(probs), list(masks))["mDice"])
    if task == "depth":
        pred = torch.cat(outs).double()
        depth = torch.cat([t["depth"] for t in targets]).double()
        lens = torch.cat([t["lens"] for t in targets])
        _, parts = ssi_mse_loss(pred, depth, lens, grad_weight=0.0, return_parts=True)
        return float(parts["ssi_mse"].mean())
    raise ValueError(task)


# --------------------------------------------------------------------------
# fine-tuning


def train(
    config: TrainConfig,
    model: nn.Module,
    splits: SplitManifest,
    manifest: DatasetManifest,
    task: str,
    acfg: aug.AugmentConfig | None = None,
    weights: ClassWeights | None = None,
    checkpoint_path: Path | None = None,
    checkpoint_header: dict | None = None,
    on_epoch: Callable[[int, RunRecord], None] | None = None,
) -> tuple[RunRecord, dict[str, torch.Tensor]]:
    """Fine-tune ``model``; returns the run record and the best-epoch state dict.

    The model is left holding the best-epoch parameters.
    """
    acfg = acfg or aug.AugmentConfig()
    if task not in VALIDATION_METRIC:
        raise ValueError(f"unsupported fine-tuning task {task!r}")
    if not splits.train or not splits.val:
        raise ValueError("training and validation splits must be non-empty")
    metric, direction = VALIDATION_METRIC[task]
    torch.manual_seed(config.seed)
    w = torch.as_tensor(weights.weights, dtype=torch.float32) if weights is not None else None
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    rec = RunRecord()
    best_state = copy.deepcopy(model.state_dict())
    rate, stale = config.lr, 0
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        for g in opt.param_groups:
            g["lr"] = rate
        model.train()
        order = np.random.default_rng(_seed_for(config.seed, 1, epoch)).permutation(len(splits.train))
        losses = []
        for step, idx in enumerate(_batches(len(order), config.batch_size, order)):
            items = [
                prepare_sample(manifest, splits.train[i], task, acfg, _seed_for(config.seed, 2, epoch, int(i)))
                for i in idx
            ]
            x, t = collate(items, task)
            loss = task_loss(model, x, t, task, config, w)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} step {step}",
                    {"epoch": epoch, "step": step, "loss": float(loss.detach()), "lr": rate, "batch_ids": [splits.train[i].id for i in idx]},
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        score = validation_score(model, manifest, splits.val, task, acfg)
        rec.train_loss.append(float(np.mean(losses)))
        rec.val_score.append(score)
        rec.lr.append(rate)
        if improved(score, rec.best_score, direction):
            rec.best_score, rec.best_epoch = score, epoch
            best_state = copy.deepcopy(model.state_dict())
            stale = 0
            if checkpoint_path is not None:
                rec.checkpoint_id = save_checkpoint(checkpoint_path, best_state, dict(checkpoint_header or {}, epoch=epoch, metric=metric, score=score))
        else:
            stale += 1
        rate, stale = lr_schedule_step(stale, rate, config.patience, config.lr_floor)
        log.info("epoch %d loss %.4f %s %.4f lr %.2e", epoch, rec.train_loss[-1], metric, score, rate)
        if on_epoch:
            on_epoch(epoch, rec)
    model.load_state_dict(best_state)
    if rec.checkpoint_id is None:
        rec.checkpoint_id = state_digest(best_state)
    rec.wall_clock = time.perf_counter() - t0
    return rec, best_state


# --------------------------------------------------------------------------
# test evaluation at original resolution


@torch.no_grad()
def evaluate(model: nn.Module, manifest: DatasetManifest, records: Sequence[ImageSample], task: str, acfg: aug.AugmentConfig | None = None) -> dict[str, Any]:
    """Test metrics; dense predictions are scored against untouched original-size targets."""
    acfg = acfg or aug.AugmentConfig()
    if not records:
        raise ValueError("empty test set")
    outs, targets = predict(model, manifest, records, task, acfg)
    flags: list[str] = []
    if task == "classification":
        pred = torch.cat(outs).argmax(1).numpy()
        true = torch.cat([t["label"] for t in targets]).numpy()
        res = M.classification_metrics(M.ConfusionCounts.from_labels(pred, true, outs[0].shape[1]))
        return {"metrics": res, "flags": flags}
    if task == "segmentation":
        probs = torch.cat(outs).numpy()
        originals = [load_target(manifest, r)["mask"] for r in records]
        res = M.segmentation_metrics(list(probs.astype(np.float64)), originals)
        per = res.pop("per_image")
        return {"metrics": res, "flags": flags, "per_image": per}
    if task == "depth":
        raw = torch.cat(outs).double()
        depth = torch.cat([t["depth"] for t in targets]).double()
        lens = torch.cat([t["lens"] for t in targets])
        sol = ssi_align(raw, depth, lens)
        pairs = []
        for i, r in enumerate(records):
            tgt = load_target(manifest, r)
            h, w = tgt["depth"].shape
            if bool(sol.degenerate[i]):
                flags.append(f"{r.id}: degenerate alignment")
            pred_cm = M.depth_postprocess(raw[i].numpy(), float(sol.scale[i]), float(sol.shift[i]), tgt["lens"], h, w)
            pairs.append(M.DepthEvalPair(pred_cm, tgt["depth"] * 10.0, tgt["lens"]))
        res = M.depth_metrics(pairs)
        per = res.pop("per_image")
        flags.extend(res.pop("flags"))
        return {"metrics": res, "flags": flags, "per_image": per}
    raise ValueError(f"unsupported task {task!r}")


# --------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainResult:
    losses: list[float]
    header: dict[str, Any]
    checkpoint_id: str


def pretrain(
    config: TrainConfig,
    ssl_cfg: SSLConfig,
    encoder: nn.Module,
    manifest: DatasetManifest,
    acfg: aug.AugmentConfig | None = None,
    dataset_id: str = "unknown",
    checkpoint_path: Path | None = None,
    views_fn: Callable | None = None,
) -> PretrainResult:
    """Optimise the chosen self-supervised objective over an unlabelled manifest.

    ``views_fn(image, seed)`` overrides view generation (used to feed
    identical views in tests).
    """
    acfg = acfg or aug.AugmentConfig()
    if ssl_cfg.algorithm == "mae" and not isinstance(encoder, ViTEncoder):
        raise ValueError("MAE requires token encoder")
    ssl_cfg.validate(n_patches=encoder.grid**2 if isinstance(encoder, ViTEncoder) and ssl_cfg.algorithm == "mae" else None)
    torch.manual_seed(config.seed)
    model = build_pretrainer(encoder, ssl_cfg)
    if isinstance(model, MAE):
        model.reseed(config.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    batch = ssl_cfg.workers * ssl_cfg.per_worker_batch
    n = len(manifest.records)
    if n < batch:
        raise ValueError(f"need at least {batch} images for one batch of {ssl_cfg.workers}x{ssl_cfg.per_worker_batch}")
    images = [load_image(manifest, r) for r in manifest.records]
    losses = []
    for epoch in range(config.epochs):
        model.train()
        order = np.random.default_rng(_seed_for(config.seed, 3, epoch)).permutation(n)
        ep = []
        for start in range(0, n - batch + 1, batch):
            idx = order[start : start + batch]
            x1s, x2s = [], []
            for i in idx:
                seed = _seed_for(config.seed, 4, epoch, int(i))
                if views_fn is not None:
                    v1, v2 = views_fn(images[i], seed)
                elif ssl_cfg.algorithm == "mae":
                    v1, _ = aug.preprocess_train(images[i], "classification", seed, acfg)
                    v2 = v1
                else:
                    vp = aug.make_view_pair(images[i], seed, acfg)
                    v1, v2 = vp.x1, vp.x2
                x1s.append(v1)
                x2s.append(v2)
            x1 = torch.from_numpy(np.stack(x1s).transpose(0, 3, 1, 2).copy()).float()
            x2 = torch.from_numpy(np.stack(x2s).transpose(0, 3, 1, 2).copy()).float()
            loss = model(x1, x2)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite pretraining loss at epoch {epoch}", {"epoch": epoch, "loss": float(loss.detach())})
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            model.after_step()
            ep.append(float(loss.detach()))
        losses.append(float(np.mean(ep)))
        log.info("pretrain %s epoch %d loss %.4f", ssl_cfg.algorithm, epoch, losses[-1])
    state = encoder.state_dict()
    header = {
        "algorithm": ssl_cfg.algorithm,
        "dataset_id": dataset_id,
        "seed": config.seed,
        "encoder": encoder.config(),
        "ssl": asdict(ssl_cfg),
        "epochs": config.epochs,
    }
    if checkpoint_path is not None:
        ckpt = save_checkpoint(checkpoint_path, state, header)
    else:
        ckpt = state_digest(state)
    header["checkpoint_id"] = ckpt
    return PretrainResult(losses=losses, header=header, checkpoint_id=ckpt)


def supervised_proxy(
    config: TrainConfig,
    encoder: nn.Module,
    manifest: DatasetManifest,
    acfg: aug.AugmentConfig | None = None,
    dataset_id: str = "unknown",
    checkpoint_path: Path | None = None,
) -> PretrainResult:
    """Stand-in for large-scale supervised pretraining: fit a classifier, keep the encoder."""
    from .data_ingest import class_weights, split_dataset, splits_from_tags
    from .task_heads import ClassificationModel

    if manifest.task_kind != "classification":
        raise ValueError("supervised-proxy pretraining needs a classification manifest")
    splits = splits_from_tags(manifest) or split_dataset(manifest, seed=config.seed)
    torch.manual_seed(config.seed)
    model = ClassificationModel(encoder, len(manifest.class_names))
    rec, _ = train(config, model, splits, manifest, "classification", acfg, class_weights(manifest))
    state = encoder.state_dict()
    header = {
        "algorithm": "supervised-proxy",
        "dataset_id": dataset_id,
        "seed": config.seed,
        "encoder": encoder.config(),
        "epochs": config.epochs,
    }
    ckpt = save_checkpoint(checkpoint_path, state, header) if checkpoint_path is not None else state_digest(state)
    header["checkpoint_id"] = ckpt
    return PretrainResult(losses=rec.train_loss, header=header, checkpoint_id=ckpt)
