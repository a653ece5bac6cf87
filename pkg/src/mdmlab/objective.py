"""Absorbing-state corruption and the 1/t-reweighted masked cross-entropy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import numeric as nx


@dataclass
class CorruptionSample:
    x0: np.ndarray
    x_t: np.ndarray
    t: float
    masked: np.ndarray          # sorted positions where x_t == MASK
    span: tuple[int, int]


def corrupt(x0, span: tuple[int, int], t: float, rng: np.random.Generator,
            mask_id: int) -> CorruptionSample:
    """Mask each position of ``span`` independently with probability ``t``.

    Positions outside the span (the prompt) are never masked. An empty draw is
    redrawn once; if still empty one uniform span position is forced.
    """
    if not 0.0 < t <= 1.0:
        raise ValueError(f"mask ratio t={t} outside (0, 1]")
    start, end = span
    if end <= start:
        raise ValueError(f"empty response span {span}")
    x0 = np.asarray(x0, dtype=np.int64)
    n = end - start
    hit = rng.random(n) < t
    if not hit.any():
        hit = rng.random(n) < t
    if not hit.any():
        hit[rng.integers(n)] = True
    masked = start + np.flatnonzero(hit)
    x_t = x0.copy()
    x_t[masked] = mask_id
    return CorruptionSample(x0, x_t, float(t), masked, (start, end))


def mdm_loss(logits: torch.Tensor, sample: CorruptionSample) -> torch.Tensor:
    """``(1/t) * sum over masked positions of -log p(x0 | x_t)`` for one sequence."""
    if logits.dim() == 3 and logits.shape[0] == 1:
        logits = logits[0]
    if logits.dim() != 2 or logits.shape[0] != len(sample.x0):
        raise nx.ShapeError("mdm_loss", logits.shape, sample.x0.shape)
    if len(sample.masked) == 0:
        return logits.sum() * 0.0
    pos = torch.as_tensor(sample.masked)
    target = torch.as_tensor(sample.x0[sample.masked])
    nll = -nx.gather(nx.log_softmax(logits[pos]), target)
    return nll.sum() / sample.t


def mdm_loss_batch(logits: torch.Tensor, x0: torch.Tensor, masked: torch.Tensor,
                   t: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of the per-sequence loss; ``masked`` is boolean ``[N, L]``."""
    if logits.shape[:2] != x0.shape or masked.shape != x0.shape or t.shape != x0.shape[:1]:
        raise nx.ShapeError("mdm_loss_batch", logits.shape, x0.shape, masked.shape, t.shape)
    nll = -nx.gather(nx.log_softmax(logits), x0)
    per_seq = (nll * masked).sum(dim=1) / t
    return per_seq.mean()


def corrupt_batch(x0: np.ndarray, prompt_len: int, rngs: list[np.random.Generator],
                  mask_id: int, t_min: float = 1e-3):
    """Per-sequence ``t ~ U(t_min, 1]`` and corruption; returns ``(x_t, masked, t)`` tensors."""
    N, L = x0.shape
    x_t = np.empty_like(x0)
    masked = np.zeros((N, L), dtype=bool)
    ts = np.empty(N)
    for i, rng in enumerate(rngs):
        t = t_min + (1.0 - t_min) * (1.0 - rng.random())
        s = corrupt(x0[i], (prompt_len, L), t, rng, mask_id)
        x_t[i] = s.x_t
        masked[i, s.masked] = True
        ts[i] = t
    return torch.from_numpy(x_t), torch.from_numpy(masked), torch.from_numpy(ts)
