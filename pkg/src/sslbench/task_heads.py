"""Downstream heads and fine-tuning losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import BasicBlock, ConvEncoder, ViTEncoder


# --------------------------------------------------------------------------
# classification


class ClassifierHead(nn.Module):
    def __init__(self, in_dim: int, n_classes: int, zero_init: bool = False):
        super().__init__()
        self.fc = nn.Linear(in_dim, n_classes)
        if zero_init:
            nn.init.zeros_(self.fc.weight)
            nn.init.zeros_(self.fc.bias)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        if feats.shape[-1] != self.fc.in_features:
            raise ValueError(f"feature dim {feats.shape[-1]} != head input {self.fc.in_features}")
        return self.fc(feats)


def classify(head: ClassifierHead, feats: torch.Tensor) -> torch.Tensor:
    return head(feats)


def weighted_cross_entropy(
    logits: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor | None = None, normalize: str = "batch"
) -> torch.Tensor:
    """Class-weighted cross entropy on softmax-normalised logits.

    ``normalize="batch"`` divides the weighted sum by the batch size; with
    weights whose dataset total equals N_D this keeps the unweighted scale.
    ``normalize="weights"`` divides by the sum of the sample weights instead.
    """
    n_c = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_c):
        raise ValueError(f"labels must lie in [0, {n_c})")
    nll = -torch.log_softmax(logits, dim=-1).gather(-1, labels[:, None])[:, 0]
    w = torch.ones_like(nll) if weights is None else weights.to(nll.dtype)[labels]
    if normalize == "batch":
        return (w * nll).sum() / nll.shape[0]
    if normalize == "weights":
        return (w * nll).sum() / w.sum()
    raise ValueError(f"unknown normalisation {normalize!r}")


# --------------------------------------------------------------------------
# dense decoders


class FusionLevel(nn.Module):
    """Halve channels (1x1 conv + BN), upsample 2x, concat skip, residual blocks."""

    def __init__(self, cin: int, cskip: int, cout: int, n_blocks: int):
        super().__init__()
        self.reduce = nn.Sequential(nn.Conv2d(cin, cin // 2, 1, bias=False), nn.BatchNorm2d(cin // 2))
        blocks = [BasicBlock(cin // 2 + cskip, cout)] + [BasicBlock(cout, cout) for _ in range(n_blocks - 1)]
        self.blocks = nn.Sequential(*blocks)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        x = self.reduce(x)
        x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        return self.blocks(torch.cat([x, skip], dim=1))


class PredictionHead(nn.Module):
    """conv3x3 -> 2x upsample -> conv3x3 -> ReLU -> conv1x1, one output channel."""

    def __init__(self, cin: int, hidden: int = 16, zero_init: bool = False):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, max(cin // 2, 1), 3, padding=1)
        self.conv2 = nn.Conv2d(max(cin // 2, 1), hidden, 3, padding=1)
        self.out = nn.Conv2d(hidden, 1, 1)
        if zero_init:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
        x = self.conv1(x)
        x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
        return self.out(F.relu(self.conv2(x)))


class FusionDecoder(nn.Module):
    """Three fusion levels over a four-level pyramid, then a prediction head."""

    def __init__(self, widths: Sequence[int], n_blocks: int = 3, zero_init: bool = False):
        super().__init__()
        if len(widths) != 4:
            raise ValueError("fusion decoder expects a 4-level pyramid")
        w1, w2, w3, w4 = widths
        self.levels = nn.ModuleList(
            [FusionLevel(w4, w3, w3, n_blocks), FusionLevel(w3, w2, w2, n_blocks), FusionLevel(w2, w1, w1, n_blocks)]
        )
        self.head = PredictionHead(w1, zero_init=zero_init)

    def forward(self, pyramid: Sequence[torch.Tensor], size: tuple[int, int]) -> torch.Tensor:
        if len(pyramid) != 4:
            raise ValueError(f"missing pyramid level: got {len(pyramid)} of 4")
        x = pyramid[3]
        for level, skip in zip(self.levels, (pyramid[2], pyramid[1], pyramid[0])):
            x = level(x, skip)
        return self.head(x, size)


class TokenReassemble(nn.Module):
    """Turn four token-grid taps into a conv-style pyramid at sides s/2 .. s/16."""

    def __init__(self, dim: int, widths: Sequence[int]):
        super().__init__()
        self.proj = nn.ModuleList([nn.Conv2d(dim, w, 1) for w in widths])

    def forward(self, taps: Sequence[torch.Tensor], grid: int, side: int) -> list[torch.Tensor]:
        out = []
        for k, (tok, proj) in enumerate(zip(taps, self.proj)):
            b, n, d = tok.shape
            x = tok.transpose(1, 2).reshape(b, d, grid, grid)
            target = max(side // 2 ** (k + 1), 1)
            x = F.interpolate(proj(x), size=(target, target), mode="bilinear", align_corners=False)
            out.append(x)
        return out


DEFAULT_DECODER_WIDTHS = (16, 32, 64, 128)


class DenseModel(nn.Module):
    """Encoder + fusion decoder producing one channel at input resolution."""

    def __init__(self, encoder: nn.Module, task: str, n_blocks: int | None = None, widths: Sequence[int] | None = None):
        super().__init__()
        if task not in ("segmentation", "depth"):
            raise ValueError(f"dense model does not support task {task!r}")
        self.task = task
        self.encoder = encoder
        n_blocks = n_blocks if n_blocks is not None else (3 if task == "depth" else 1)
        if isinstance(encoder, ConvEncoder):
            if len(encoder.widths) != 4:
                raise ValueError("conv dense path needs a 4-stage encoder")
            widths = tuple(encoder.widths)
            self.reassemble = None
        else:
            widths = tuple(widths or DEFAULT_DECODER_WIDTHS)
            self.reassemble = TokenReassemble(encoder.dim, widths)
        self.decoder = FusionDecoder(widths, n_blocks=n_blocks, zero_init=(task == "segmentation"))

    def pyramid(self, x: torch.Tensor) -> list[torch.Tensor]:
        if self.reassemble is None:
            return self.encoder(x)["features"]
        out = self.encoder(x, taps=True)
        return self.reassemble(out["taps"], out["grid"], x.shape[-1])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Logits ``(B, H, W)``; apply a sigmoid for probabilities / depth."""
        return self.decoder(self.pyramid(x), x.shape[-2:])[:, 0]


def segment(model: DenseModel, x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(model(x))


def depth_decode(model: DenseModel, x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(model(x))


class ClassificationModel(nn.Module):
    def __init__(self, encoder: nn.Module, n_classes: int, zero_init: bool = False):
        super().__init__()
        self.task = "classification"
        self.encoder = encoder
        self.head = ClassifierHead(encoder.out_dim, n_classes, zero_init)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder(x)["pooled"])


def build_task_model(encoder: nn.Module, task: str, n_classes: int | None = None) -> nn.Module:
    if task == "classification":
        if not n_classes:
            raise ValueError("classification needs n_classes")
        return ClassificationModel(encoder, n_classes)
    return DenseModel(encoder, task)


# --------------------------------------------------------------------------
# losses


def dice_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """Soft Dice per image, ``1 - (2 sum(pt) + eps) / (sum(p) + sum(t) + eps)``, batch mean.

    Accepts ``(H, W)`` or ``(B, H, W)``.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.ndim == 2:
        pred, target = pred[None], target[None]
    p = pred.flatten(1)
    t = target.flatten(1).to(p.dtype)
    num = 2 * (p * t).sum(1) + eps
    den = p.sum(1) + t.sum(1) + eps
    return (1 - num / den).mean()


@dataclass
class AlignmentSolution:
    scale: torch.Tensor
    shift: torch.Tensor
    degenerate: torch.Tensor  # bool per image


def ssi_align(pred: torch.Tensor, target: torch.Tensor, lens: torch.Tensor) -> AlignmentSolution:
    """Least-squares scale and shift of ``pred`` onto ``target`` over lens pixels.

    Shapes ``(H, W)`` or ``(B, H, W)``. A prediction that is constant on the
    lens has no unique scale; it falls back to ``s = 0, t = mean(target)``.
    """
    if pred.ndim == 2:
        pred, target, lens = pred[None], target[None], lens[None]
    m = lens.to(pred.dtype).flatten(1)
    p = pred.flatten(1)
    y = target.flatten(1).to(pred.dtype)
    n = m.sum(1)
    if (n < 2).any():
        raise ValueError("alignment needs at least 2 lens pixels")
    pm = (m * p).sum(1) / n
    ym = (m * y).sum(1) / n
    pc = (p - pm[:, None]) * m
    yc = (y - ym[:, None]) * m
    var = (pc * pc).sum(1)
    cov = (pc * yc).sum(1)
    scale_ref = (m * p * p).sum(1).detach().clamp_min(1e-30)
    degenerate = var.detach() <= 1e-12 * scale_ref
    safe_var = torch.where(degenerate, torch.ones_like(var), var)
    s = torch.where(degenerate, torch.zeros_like(var), cov / safe_var)
    t = ym - s * pm
    return AlignmentSolution(scale=s, shift=t, degenerate=degenerate)


def _gradient_term(res: torch.Tensor, lens: torch.Tensor, scales: int) -> torch.Tensor:
    terms = []
    for k in range(scales):
        step = 2**k
        r = res[:, ::step, ::step]
        m = lens[:, ::step, ::step]
        mx = m[:, :, 1:] & m[:, :, :-1]
        my = m[:, 1:, :] & m[:, :-1, :]
        gx = (r[:, :, 1:] - r[:, :, :-1]).abs() * mx
        gy = (r[:, 1:, :] - r[:, :-1, :]).abs() * my
        count = mx.flatten(1).sum(1) + my.flatten(1).sum(1)
        valid = count > 0
        if not valid.any():
            continue
        val = (gx.flatten(1).sum(1) + gy.flatten(1).sum(1)) / count.clamp_min(1)
        terms.append(torch.where(valid, val, torch.zeros_like(val)))
    if not terms:
        return torch.zeros(res.shape[0], dtype=res.dtype)
    return torch.stack(terms).mean(0)


def ssi_mse_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    lens: torch.Tensor,
    grad_weight: float = 0.5,
    scales: int = 4,
    return_parts: bool = False,
):
    """Aligned MSE over lens pixels plus a multi-scale L1 gradient-matching term.

    Gradients flow through the closed-form scale and shift. Returns the batch
    mean; with ``return_parts`` also the per-image SSI-MSE, gradient term and
    degenerate flags.
    """
    if pred.ndim == 2:
        pred, target, lens = pred[None], target[None], lens[None]
    lens = lens.bool()
    sol = ssi_align(pred, target, lens)
    res = (sol.scale[:, None, None] * pred + sol.shift[:, None, None] - target) * lens
    n = lens.flatten(1).sum(1)
    ssi = (res * res).flatten(1).sum(1) / n
    grad = _gradient_term(res, lens, scales) if grad_weight else torch.zeros_like(ssi)
    loss = (ssi + grad_weight * grad).mean()
    if return_parts:
        return loss, {"ssi_mse": ssi.detach(), "grad": grad.detach(), "degenerate": sol.degenerate}
    return loss
