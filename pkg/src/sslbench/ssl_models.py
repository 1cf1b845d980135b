"""Pretraining wrappers pairing an encoder with projector/predictor/decoder heads."""

from __future__ import annotations

import torch
import torch.nn as nn

from .encoders import Block, ViTEncoder, ema_update, make_shadow
from .ssl_losses import (
    SSLConfig,
    barlow_loss,
    barlow_normalize,
    mae_loss,
    mae_mask,
    mae_reinsert,
    moco_v3_loss,
    patchify,
    split_shards,
)


def mlp(cin: int, hidden: int, cout: int, last_bn: bool) -> nn.Sequential:
    layers: list[nn.Module] = [
        nn.Linear(cin, hidden, bias=False),
        nn.BatchNorm1d(hidden),
        nn.ReLU(inplace=True),
        nn.Linear(hidden, cout, bias=False),
    ]
    if last_bn:
        layers.append(nn.BatchNorm1d(cout, affine=False))
    return nn.Sequential(*layers)


class MoCoV3(nn.Module):
    def __init__(self, encoder: nn.Module, cfg: SSLConfig, proj_dim: int | None = None):
        super().__init__()
        d = encoder.out_dim
        proj_dim = proj_dim or d
        self.cfg = cfg
        self.encoder = encoder
        self.projector = mlp(d, 4 * d, proj_dim, last_bn=True)
        self.predictor = mlp(proj_dim, 4 * d, proj_dim, last_bn=False)
        if isinstance(encoder, ViTEncoder):
            encoder.set_patch_embed_frozen(True)
        self.m_encoder = make_shadow(encoder)
        self.m_projector = make_shadow(self.projector)

    def online_params(self):
        return list(self.encoder.parameters()) + list(self.projector.parameters())

    def momentum_params(self):
        return list(self.m_encoder.parameters()) + list(self.m_projector.parameters())

    def forward(self, x1: torch.Tensor, x2: torch.Tensor) -> torch.Tensor:
        # one forward over the full logical batch: batch norm is synchronised
        q1 = self.predictor(self.projector(self.encoder(x1)["pooled"]))
        q2 = self.predictor(self.projector(self.encoder(x2)["pooled"]))
        with torch.no_grad():
            k1 = self.m_projector(self.m_encoder(x1)["pooled"])
            k2 = self.m_projector(self.m_encoder(x2)["pooled"])
        shards = split_shards(q1, q2, k1, k2, self.cfg.workers)
        return torch.stack(moco_v3_loss(shards, self.cfg.tau)).mean()

    def after_step(self) -> None:
        ema_update(self.online_params(), self.momentum_params(), self.cfg.momentum)


class BarlowTwins(nn.Module):
    def __init__(self, encoder: nn.Module, cfg: SSLConfig, proj_dim: int | None = None):
        super().__init__()
        d = encoder.out_dim
        self.cfg = cfg
        self.encoder = encoder
        self.projector = mlp(d, 4 * d, proj_dim or 4 * d, last_bn=False)

    def forward(self, x1: torch.Tensor, x2: torch.Tensor) -> torch.Tensor:
        z1 = self.projector(self.encoder(x1)["pooled"])
        z2 = self.projector(self.encoder(x2)["pooled"])
        n = self.cfg.workers
        nb = z1.shape[0] // n
        zs1 = [barlow_normalize(z1[w * nb : (w + 1) * nb]) for w in range(n)]
        zs2 = [barlow_normalize(z2[w * nb : (w + 1) * nb]) for w in range(n)]
        return barlow_loss(zs1, zs2, self.cfg.lam)

    def after_step(self) -> None:
        pass


class MAE(nn.Module):
    def __init__(self, encoder: nn.Module, cfg: SSLConfig, dec_depth: int = 2, dec_dim: int | None = None):
        super().__init__()
        if not isinstance(encoder, ViTEncoder):
            raise ValueError("MAE requires token encoder")
        self.cfg = cfg
        self.encoder = encoder
        n_p = encoder.grid**2
        cfg.validate(n_patches=n_p)
        dec_dim = dec_dim or max(encoder.dim // 2, encoder.heads)
        heads = max(1, min(encoder.heads, dec_dim // 8)) if dec_dim % 8 == 0 else 1
        self.decoder_embed = nn.Linear(encoder.dim, dec_dim)
        self.mask_token = nn.Parameter(torch.zeros(dec_dim))
        nn.init.normal_(self.mask_token, std=0.02)
        self.decoder_pos = nn.Parameter(torch.zeros(1, 1 + n_p, dec_dim))
        nn.init.trunc_normal_(self.decoder_pos, std=0.02)
        self.decoder = nn.ModuleList([Block(dec_dim, heads) for _ in range(dec_depth)])
        self.decoder_norm = nn.LayerNorm(dec_dim)
        self.head = nn.Linear(dec_dim, encoder.patch**2 * 3)
        self._gen = torch.Generator().manual_seed(0)

    def reseed(self, seed: int) -> None:
        self._gen.manual_seed(seed)

    def forward(self, imgs: torch.Tensor, x2: torch.Tensor | None = None) -> torch.Tensor:
        enc = self.encoder
        tokens, cls_pos = enc.embed(imgs)
        kept, plan = mae_mask(tokens, self.cfg.gamma, self._gen)
        cls = (enc.cls_token + cls_pos).expand(tokens.shape[0], -1, -1)
        latent, _ = enc.run_blocks(torch.cat([cls, kept], dim=1), grid=None)
        z = self.decoder_embed(latent)
        full = mae_reinsert(z[:, 1:], plan, self.mask_token)
        x = torch.cat([z[:, :1], full], dim=1) + self.decoder_pos
        for blk in self.decoder:
            x = blk(x)
        pred = self.head(self.decoder_norm(x))[:, 1:]
        return mae_loss(pred, patchify(imgs, enc.patch), plan)

    def after_step(self) -> None:
        pass


def build_pretrainer(encoder: nn.Module, cfg: SSLConfig) -> nn.Module:
    if cfg.algorithm == "mocov3":
        return MoCoV3(encoder, cfg)
    if cfg.algorithm == "barlow":
        return BarlowTwins(encoder, cfg, cfg.proj_dim)
    if cfg.algorithm == "mae":
        if not isinstance(encoder, ViTEncoder):
            raise ValueError("MAE requires token encoder")
        return MAE(encoder, cfg)
    raise ValueError(f"unknown ssl algorithm {cfg.algorithm!r}")
