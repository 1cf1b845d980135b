"""Pretraining objectives: contrastive (momentum), redundancy reduction and masked reconstruction.

Multi-worker semantics are simulated: a batch is split into equally sized
shards processed in ascending worker order, and the single synchronisation
point (key gather or cross-correlation average) is reproduced explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F


class SSLConfigError(ValueError):
    pass


@dataclass
class SSLConfig:
    algorithm: str = "mocov3"
    tau: float = 0.2
    lam: float = 5e-3
    gamma: float = 0.75
    momentum: float = 0.99
    workers: int = 1
    per_worker_batch: int = 8
    proj_dim: int | None = None  # barlow projector width; None means 4x the encoder width

    def validate(self, n_patches: int | None = None) -> None:
        if self.algorithm not in ("mocov3", "barlow", "mae"):
            raise SSLConfigError(f"unknown ssl algorithm {self.algorithm!r}")
        if self.tau <= 0:
            raise SSLConfigError("tau must be positive")
        if self.lam <= 0:
            raise SSLConfigError("lambda must be positive")
        if not 0.0 <= self.momentum <= 1.0:
            raise SSLConfigError("momentum must lie in [0, 1]")
        if self.workers < 1 or self.per_worker_batch < 1:
            raise SSLConfigError("workers and per_worker_batch must be >= 1")
        if self.proj_dim is not None and self.proj_dim < 1:
            raise SSLConfigError("proj_dim must be >= 1")
        if n_patches is not None:
            check_mask_ratio(self.gamma, n_patches)


# --------------------------------------------------------------------------
# contrastive


def cosim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    na, nb = a.norm(), b.norm()
    if na == 0 or nb == 0:
        raise ValueError("undefined cosine similarity for a zero vector")
    return (a @ b) / (na * nb)


def _cosine_matrix(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    if (q.norm(dim=1) == 0).any() or (k.norm(dim=1) == 0).any():
        raise ValueError("undefined cosine similarity for a zero vector")
    return F.normalize(q, dim=1) @ F.normalize(k, dim=1).T


def info_nce(q: torch.Tensor, keys: torch.Tensor, positive_index: int, tau: float) -> torch.Tensor:
    """``-log softmax(cos(q, keys) / tau)[positive_index]`` for a single query."""
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise ValueError("keys must be a non-empty (K, D) tensor")
    if not 0 <= positive_index < keys.shape[0]:
        raise IndexError(f"positive index {positive_index} out of range")
    logits = _cosine_matrix(q[None], keys)[0] / tau
    return torch.logsumexp(logits, 0) - logits[positive_index]


def info_nce_batch(q: torch.Tensor, keys: torch.Tensor, positives: torch.Tensor, tau: float) -> torch.Tensor:
    logits = _cosine_matrix(q, keys) / tau
    return torch.logsumexp(logits, 1) - logits.gather(1, positives[:, None])[:, 0]


@dataclass
class WorkerShard:
    worker_id: int
    q1: torch.Tensor
    q2: torch.Tensor
    k1: torch.Tensor
    k2: torch.Tensor


def split_shards(q1, q2, k1, k2, workers: int) -> list[WorkerShard]:
    n = q1.shape[0]
    if n % workers:
        raise ValueError(f"batch of {n} does not split into {workers} equal shards")
    nb = n // workers
    return [
        WorkerShard(w, q1[w * nb : (w + 1) * nb], q2[w * nb : (w + 1) * nb], k1[w * nb : (w + 1) * nb], k2[w * nb : (w + 1) * nb])
        for w in range(workers)
    ]


def moco_v3_loss(shards: Sequence[WorkerShard], tau: float) -> list[torch.Tensor]:
    """Symmetrised InfoNCE per worker with keys gathered from every worker.

    Each worker sees its own keys first followed by the other workers' keys
    in ascending id, so the positive for local sample ``i`` sits at index
    ``i``. Loss per worker is ``2 tau / N_b * sum_i [INCE(q_i1, K_2) + INCE(q_i2, K_1)]``.
    """
    shards = sorted(shards, key=lambda s: s.worker_id)
    sizes = {s.q1.shape[0] for s in shards} | {s.k1.shape[0] for s in shards}
    if len(sizes) != 1:
        raise ValueError("all worker shards must have the same batch size")
    nb = sizes.pop()
    pos = torch.arange(nb)
    losses = []
    for s in shards:
        others = [o for o in shards if o.worker_id != s.worker_id]
        k1 = torch.cat([s.k1] + [o.k1 for o in others])
        k2 = torch.cat([s.k2] + [o.k2 for o in others])
        total = info_nce_batch(s.q1, k2, pos, tau).sum() + info_nce_batch(s.q2, k1, pos, tau).sum()
        losses.append(2 * tau / nb * total)
    return losses


# --------------------------------------------------------------------------
# redundancy reduction


def barlow_normalize(z: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Standardise each feature over the batch with population statistics.

    Variance is floored at ``eps`` so constant features map to zero.
    """
    if z.shape[0] < 2:
        raise ValueError("batch normalisation needs at least 2 samples")
    mu = z.mean(0, keepdim=True)
    var = ((z - mu) ** 2).mean(0, keepdim=True)
    return (z - mu) / torch.sqrt(torch.clamp(var, min=eps))


def cross_correlation(z1_hat: torch.Tensor, z2_hat: torch.Tensor) -> torch.Tensor:
    if z1_hat.shape != z2_hat.shape:
        raise ValueError(f"dimension mismatch {tuple(z1_hat.shape)} vs {tuple(z2_hat.shape)}")
    return z1_hat.T @ z2_hat / z1_hat.shape[0]


def barlow_loss_from_c(c: torch.Tensor, lam: float) -> torch.Tensor:
    diag = torch.diagonal(c)
    off = c - torch.diag_embed(diag)
    return ((1 - diag) ** 2).sum() + lam * (off**2).sum()


def barlow_loss(z1_hat: Sequence[torch.Tensor], z2_hat: Sequence[torch.Tensor], lam: float) -> torch.Tensor:
    """Per-worker cross-correlation, averaged across workers, then the loss.

    ``z1_hat[w]`` / ``z2_hat[w]`` are the normalised representations of worker ``w``.
    """
    if len(z1_hat) != len(z2_hat) or not z1_hat:
        raise ValueError("need one (z1, z2) pair per worker")
    dims = {z.shape[1] for z in list(z1_hat) + list(z2_hat)}
    if len(dims) != 1:
        raise ValueError("representation dimension differs across workers")
    cs = [cross_correlation(a, b) for a, b in zip(z1_hat, z2_hat)]
    c_bar = torch.stack(cs).mean(0)
    return barlow_loss_from_c(c_bar, lam)


# --------------------------------------------------------------------------
# masked reconstruction


def check_mask_ratio(gamma: float, n_patches: int) -> int:
    if not 0.0 <= gamma <= 1.0:
        raise SSLConfigError(f"mask ratio {gamma} outside [0, 1]")
    masked = gamma * n_patches
    if abs(masked - round(masked)) > 1e-9:
        raise SSLConfigError(f"gamma * N_p = {masked} is not integral")
    return int(round(masked))


@dataclass
class MaskingPlan:
    """``order[..., i]`` is the (0-based) patch index ranked ``i`` by descending score."""

    order: torch.Tensor
    gamma: float

    @property
    def n_patches(self) -> int:
        return self.order.shape[-1]

    @property
    def n_masked(self) -> int:
        return check_mask_ratio(self.gamma, self.n_patches)

    @property
    def n_keep(self) -> int:
        return self.n_patches - self.n_masked

    @property
    def kept(self) -> torch.Tensor:
        return self.order[..., : self.n_keep]

    @property
    def inverse(self) -> torch.Tensor:
        return torch.argsort(self.order, dim=-1)

    def masked_indicator(self) -> torch.Tensor:
        """Boolean map over patch positions, True where the patch is hidden."""
        return self.inverse >= self.n_keep


def plan_from_scores(alpha: torch.Tensor, gamma: float) -> MaskingPlan:
    check_mask_ratio(gamma, alpha.shape[-1])
    order = torch.sort(alpha, dim=-1, descending=True, stable=True).indices
    return MaskingPlan(order=order, gamma=gamma)


def mae_mask(
    tokens: torch.Tensor, gamma: float, rng: int | torch.Generator
) -> tuple[torch.Tensor, MaskingPlan]:
    """Draw uniform scores, keep the top ``(1 - gamma) N_p`` tokens.

    ``tokens`` is ``(N_p, D)`` or ``(B, N_p, D)``; each batch row gets its own
    permutation but the same masked count.
    """
    gen = rng if isinstance(rng, torch.Generator) else torch.Generator().manual_seed(int(rng))
    alpha = torch.rand(tokens.shape[:-1], generator=gen, dtype=torch.float64)
    plan = plan_from_scores(alpha, gamma)
    idx = plan.kept[..., None].expand(*plan.kept.shape, tokens.shape[-1])
    return torch.gather(tokens, -2, idx), plan


def mae_reinsert(z_kept: torch.Tensor, plan: MaskingPlan, mask_token: torch.Tensor) -> torch.Tensor:
    """Scatter processed kept tokens back to their positions; fill the rest with ``mask_token``."""
    if z_kept.shape[-2] != plan.n_keep:
        raise ValueError(f"expected {plan.n_keep} kept tokens, got {z_kept.shape[-2]}")
    d = z_kept.shape[-1]
    fill = mask_token.to(z_kept.dtype).expand(*z_kept.shape[:-2], plan.n_masked, d)
    ranked = torch.cat([z_kept, fill], dim=-2)
    idx = plan.inverse[..., None].expand(*plan.inverse.shape, d)
    return torch.gather(ranked, -2, idx)


def normalize_patches(patches: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    if patches.shape[-1] < 2:
        raise ValueError("per-patch normalisation needs patch dimension >= 2")
    mu = patches.mean(-1, keepdim=True)
    var = ((patches - mu) ** 2).mean(-1, keepdim=True)
    return (patches - mu) / torch.sqrt(var + eps)


def mae_loss(pred: torch.Tensor, target_raw: torch.Tensor, plan: MaskingPlan, eps: float = 1e-6) -> torch.Tensor:
    """Mean squared error over hidden patches only, against per-patch normalised targets.

    Inputs are ``(N_p, d_p)`` or ``(B, N_p, d_p)``; the per-image losses are
    averaged over the batch.
    """
    if pred.shape != target_raw.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target_raw.shape)}")
    if plan.n_masked == 0:
        raise ValueError("loss undefined with no masked tokens")
    target = normalize_patches(target_raw, eps)
    per_patch = ((pred - target) ** 2).sum(-1)
    masked = plan.masked_indicator()
    # select rather than multiply so unmasked positions cannot leak NaN/inf
    per_image = torch.where(masked, per_patch, torch.zeros_like(per_patch)).sum(-1) / (plan.n_masked * pred.shape[-1])
    return per_image.mean()


def patchify(imgs: torch.Tensor, patch: int) -> torch.Tensor:
    """``(B, C, H, W)`` -> ``(B, N_p, patch*patch*C)`` in row-major patch order."""
    b, c, h, w = imgs.shape
    gh, gw = h // patch, w // patch
    x = imgs.reshape(b, c, gh, patch, gw, patch)
    return x.permute(0, 2, 4, 3, 5, 1).reshape(b, gh * gw, patch * patch * c)
