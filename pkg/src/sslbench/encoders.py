"""Small convolutional and ViT encoders, EMA shadows and checkpoint io."""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class ConvEncoder(nn.Module):
    """Residual encoder; every stage halves the spatial side."""

    kind = "conv"

    def __init__(self, widths: Sequence[int] = (16, 32, 64, 128), blocks: Sequence[int] = (2, 2, 2, 2), in_ch: int = 3):
        super().__init__()
        if len(widths) != len(blocks):
            raise ValueError("widths and blocks must have equal length")
        self.widths = tuple(widths)
        self.blocks = tuple(blocks)
        stages = []
        cin = in_ch
        for wd, nb in zip(widths, blocks):
            layers = [BasicBlock(cin, wd, stride=2)] + [BasicBlock(wd, wd) for _ in range(nb - 1)]
            stages.append(nn.Sequential(*layers))
            cin = wd
        self.stages = nn.ModuleList(stages)
        self.out_dim = widths[-1]

    def config(self) -> dict:
        return {"arch": "conv", "widths": list(self.widths), "blocks": list(self.blocks)}

    def forward(self, x: torch.Tensor) -> dict[str, object]:
        div = 2 ** len(self.stages)
        if x.shape[-1] % div or x.shape[-2] % div:
            raise ValueError(f"input side must be divisible by {div}, got {tuple(x.shape[-2:])}")
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return {"features": feats, "pooled": x.mean(dim=(2, 3))}


def encode_conv(encoder: ConvEncoder, x: torch.Tensor) -> dict[str, object]:
    return encoder(x)


# --------------------------------------------------------------------------
# ViT


def window_mask(grid: int, window: int, with_cls: bool = True) -> torch.Tensor | None:
    """Boolean attention mask for non-overlapping square windows.

    Patch tokens attend within their window (and to the class token); the
    class token attends to everything. ``None`` means global attention.
    """
    if window <= 0 or window == grid:
        return None
    if grid % window:
        raise ValueError(f"window size {window} does not divide token grid {grid}")
    r, c = np.divmod(np.arange(grid * grid), grid)
    wid = (r // window) * (grid // window) + c // window
    m = wid[:, None] == wid[None, :]
    if with_cls:
        full = np.ones((m.shape[0] + 1, m.shape[0] + 1), dtype=bool)
        full[1:, 1:] = m
        m = full
    return torch.from_numpy(m)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        if mask is not None:
            attn = attn.masked_fill(~mask, float("-inf"))
        attn = attn.softmax(dim=-1)
        return self.proj((attn @ v).transpose(1, 2).reshape(b, n, c))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), mask)
        return x + self.mlp(self.norm2(x))


def global_block_ids(depth: int) -> set[int]:
    """Blocks (0-based) at multiples of depth/4 use global attention: 2, 5, 8, 11 for depth 12."""
    step = max(depth // 4, 1)
    return {i for i in range(depth) if (i + 1) % step == 0}


class ViTEncoder(nn.Module):
    kind = "vit"

    def __init__(
        self,
        img_size: int = 64,
        patch: int = 8,
        dim: int = 64,
        depth: int = 4,
        heads: int = 4,
        window: int = 0,
        frozen_patch_embed: bool = False,
    ):
        super().__init__()
        if img_size % patch:
            raise ValueError(f"image side {img_size} not divisible by patch {patch}")
        self.img_size, self.patch, self.dim, self.depth, self.heads = img_size, patch, dim, depth, heads
        self.grid = img_size // patch
        self.window = window
        self.patch_embed = nn.Conv2d(3, dim, patch, patch)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + self.grid**2, dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.blocks = nn.ModuleList([Block(dim, heads) for _ in range(depth)])
        self.norm = nn.LayerNorm(dim)
        self.out_dim = dim
        self._global = global_block_ids(depth)
        window_mask(self.grid, window)  # validates divisibility
        self.set_patch_embed_frozen(frozen_patch_embed)

    def config(self) -> dict:
        return {
            "arch": "vit",
            "img_size": self.img_size,
            "patch": self.patch,
            "dim": self.dim,
            "depth": self.depth,
            "heads": self.heads,
            "window": self.window,
        }

    def set_patch_embed_frozen(self, frozen: bool) -> None:
        self.frozen_patch_embed = frozen
        for p in self.patch_embed.parameters():
            p.requires_grad_(not frozen)

    def tap_ids(self) -> list[int]:
        """Four evenly spaced block indices for dense decoders."""
        return [round((i + 1) * self.depth / 4) - 1 for i in range(4)]

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % self.patch or x.shape[-2] % self.patch:
            raise ValueError(f"input side must be divisible by patch size {self.patch}")
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)
        grid = x.shape[-1] // self.patch
        pos = self.pos_embed
        if grid != self.grid:
            pos = interpolate_pos_embed(pos, grid)
        return tokens + pos[:, 1:], pos[:, :1]

    def run_blocks(self, x: torch.Tensor, grid: int | None, taps: bool = False):
        """Run the transformer on ``[cls] + tokens``; ``grid`` enables windows."""
        mask = window_mask(grid, self.window) if grid is not None else None
        tapped = []
        tap_ids = set(self.tap_ids()) if taps else set()
        for i, blk in enumerate(self.blocks):
            x = blk(x, None if i in self._global else mask)
            if i in tap_ids:
                tapped.append(x)
        return self.norm(x), tapped

    def forward(self, x: torch.Tensor, taps: bool = False) -> dict[str, object]:
        tokens, cls_pos = self.embed(x)
        cls = (self.cls_token + cls_pos).expand(tokens.shape[0], -1, -1)
        out, tapped = self.run_blocks(torch.cat([cls, tokens], dim=1), x.shape[-1] // self.patch, taps)
        res = {"tokens": out[:, 1:], "cls": out[:, 0], "pooled": out[:, 0], "grid": x.shape[-1] // self.patch}
        if taps:
            res["taps"] = [t[:, 1:] for t in tapped]
        return res


def encode_vit(encoder: ViTEncoder, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    out = encoder(x)
    return out["tokens"], out["cls"]


def interpolate_pos_embed(pos: torch.Tensor, new_grid: int) -> torch.Tensor:
    """Bilinearly resize a ``(1, 1 + g*g, D)`` position embedding to ``new_grid``.

    The class-token slot is passed through untouched.
    """
    n = pos.shape[1] - 1
    g = int(round(math.sqrt(n)))
    if g * g != n:
        raise ValueError(f"position grid of {n} tokens is not square")
    if g == new_grid:
        return pos
    cls, grid = pos[:, :1], pos[:, 1:]
    d = grid.shape[-1]
    grid = grid.reshape(1, g, g, d).permute(0, 3, 1, 2)
    grid = F.interpolate(grid, size=(new_grid, new_grid), mode="bilinear", align_corners=False)
    grid = grid.permute(0, 2, 3, 1).reshape(1, new_grid * new_grid, d)
    return torch.cat([cls, grid], dim=1)


# --------------------------------------------------------------------------
# EMA


@torch.no_grad()
def ema_update(online: Iterable[torch.Tensor], shadow: Iterable[torch.Tensor], momentum: float) -> None:
    """In place ``shadow = momentum * shadow + (1 - momentum) * online``."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {momentum}")
    online, shadow = list(online), list(shadow)
    if len(online) != len(shadow):
        raise ValueError("parameter count mismatch between online and shadow")
    for o, s in zip(online, shadow):
        if o.shape != s.shape:
            raise ValueError(f"shape mismatch {tuple(o.shape)} vs {tuple(s.shape)}")
        s.mul_(momentum).add_(o.detach(), alpha=1.0 - momentum)


def make_shadow(module: nn.Module) -> nn.Module:
    import copy

    shadow = copy.deepcopy(module)
    for p in shadow.parameters():
        p.requires_grad_(False)
    return shadow


def build_encoder(cfg: dict) -> nn.Module:
    cfg = dict(cfg)
    arch = cfg.pop("arch")
    if arch == "conv":
        return ConvEncoder(**cfg)
    if arch == "vit":
        return ViTEncoder(**cfg)
    raise ValueError(f"unknown architecture {arch!r}")


# --------------------------------------------------------------------------
# checkpoints

HEADER_KEY = "__header__"


def state_digest(state: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for k in sorted(state):
        h.update(k.encode())
        h.update(state[k].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(path: str | Path, state: dict[str, torch.Tensor], header: dict) -> str:
    """Write named arrays plus a JSON header to one ``.npz`` file; returns the content id."""
    ckpt_id = state_digest(state)
    header = dict(header, checkpoint_id=ckpt_id)
    arrays = {k: v.detach().cpu().numpy() for k, v in state.items()}
    arrays[HEADER_KEY] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return ckpt_id


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(z[HEADER_KEY].tobytes().decode())
        state = {k: torch.from_numpy(z[k].copy()) for k in z.files if k != HEADER_KEY}
    return state, header
