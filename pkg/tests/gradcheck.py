"""Central finite differences for scalar losses in float64."""

from __future__ import annotations

import torch


def fd_relative_error(fn, x: torch.Tensor, h: float = 1e-6) -> float:
    x = x.detach().double().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    num = torch.zeros_like(x)
    flat, nflat = x.detach().view(-1), num.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = fn(x.detach()).item()
            flat[i] = orig - h
            down = fn(x.detach()).item()
            flat[i] = orig
            nflat[i] = (up - down) / (2 * h)
    denom = max(g.norm().item(), num.norm().item(), 1e-12)
    return (g - num).norm().item() / denom
