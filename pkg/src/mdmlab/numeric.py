"""Dense float64 tensor ops with reverse-mode gradients.

Autodiff is delegated to torch's autograd; this module fixes the dtype, the op
vocabulary used by the model and the losses, loud shape checks, and an
independent central-difference checker.
"""

from __future__ import annotations

import math
from typing import Callable, Mapping

import numpy as np
import torch

DTYPE = torch.float64
LN_EPS = 1e-5

torch.set_default_dtype(DTYPE)


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shape."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        super().__init__(f"{op}: incompatible shapes {self.shapes}")


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(data, dtype=DTYPE)
    if requires_grad:
        t = t.clone().requires_grad_(True)
    return t


def _same_trailing(op: str, a: torch.Tensor, b: torch.Tensor) -> None:
    # only leading-batch broadcasting is permitted
    if a.shape == b.shape:
        return
    short, long_ = (a, b) if a.dim() < b.dim() else (b, a)
    if short.dim() == long_.dim() or tuple(long_.shape[-short.dim():]) != tuple(short.shape):
        raise ShapeError(op, a.shape, b.shape)


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_trailing("add", a, b)
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_trailing("mul", a, b)
    return a * b


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]``."""
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if b.dim() > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    return a @ b


def softmax(x: torch.Tensor) -> torch.Tensor:
    z = x - x.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def log_softmax(x: torch.Tensor) -> torch.Tensor:
    z = x - x.max(dim=-1, keepdim=True).values.detach()
    return z - torch.log(torch.exp(z).sum(dim=-1, keepdim=True))


def layer_norm(x: torch.Tensor, gain: torch.Tensor | None = None,
               bias: torch.Tensor | None = None, eps: float = LN_EPS) -> torch.Tensor:
    if gain is not None and tuple(gain.shape) != (x.shape[-1],):
        raise ShapeError("layer_norm", x.shape, gain.shape)
    if bias is not None and tuple(bias.shape) != (x.shape[-1],):
        raise ShapeError("layer_norm", x.shape, bias.shape)
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    y = (x - mu) / torch.sqrt(var + eps)
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return y


def gelu(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def embedding(ids: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    if table.dim() != 2:
        raise ShapeError("embedding", ids.shape, table.shape)
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ValueError(f"embedding: id out of range [0, {table.shape[0]})")
    return table[ids]


def gather(x: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    """Pick ``x[..., index[...]]`` along the last axis."""
    if x.shape[:-1] != index.shape:
        raise ShapeError("gather", x.shape, index.shape)
    return torch.gather(x, -1, index.unsqueeze(-1)).squeeze(-1)


def attention_scores(q: torch.Tensor, k: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
    """Masked scaled dot-product scores ``q k^T / sqrt(d)``; disallowed -> -inf.

    q, k: ``[..., L, d]``; allowed: boolean ``[L, L]`` (or ``[..., L, L]``).
    """
    if q.shape != k.shape or allowed.shape[-2:] != (q.shape[-2], k.shape[-2]):
        raise ShapeError("attention_scores", q.shape, k.shape, allowed.shape)
    s = (q @ k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    return s.masked_fill(~allowed, float("-inf"))


def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of a scalar ``loss`` for every parameter.

    Parameters the loss does not depend on get a zero tensor.
    """
    if loss.dim() != 0 and loss.numel() != 1:
        raise ValueError(f"backward: output must be scalar, got shape {tuple(loss.shape)}")
    names = list(params)
    leaves = [params[n] for n in names]
    if not loss.requires_grad:
        return {n: torch.zeros_like(p) for n, p in zip(names, leaves)}
    grads = torch.autograd.grad(loss.reshape(()), leaves, allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g) for n, p, g in zip(names, leaves, grads)}


def finite_diff_check(
    loss_fn: Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    eps: float = 1e-5,
    n_coords: int = 8,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    ``loss_fn`` maps a parameter dict to a scalar tensor. Up to ``n_coords``
    coordinates per parameter are probed. Error per coordinate is
    ``|a - n| / max(1, |a|, |n|)``; an empty parameter set returns 0.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps={eps} outside [1e-7, 1e-3]")
    if not params:
        return 0.0
    base = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    grads = backward(loss_fn(base), base)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        probe = {k: v.detach().clone() for k, v in params.items()}
        for name, p in probe.items():
            flat = p.view(-1)
            n = flat.numel()
            coords = rng.choice(n, size=min(n_coords, n), replace=False) if n else []
            for c in coords:
                orig = flat[c].item()
                flat[c] = orig + eps
                up = float(loss_fn(probe))
                flat[c] = orig - eps
                down = float(loss_fn(probe))
                flat[c] = orig
                numeric = (up - down) / (2 * eps)
                analytic = float(grads[name].reshape(-1)[c])
                err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
                worst = max(worst, err)
    return worst
