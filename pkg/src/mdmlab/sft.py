"""Supervised warm-up with the masked-diffusion objective at a fixed block size."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from . import numeric as nx
from .io import rng_for
from .model import BlockPartition, ModelConfig, forward_train, sequence_partition
from .objective import corrupt_batch, mdm_loss_batch
from .tasks import Problem, SequenceLayout

log = logging.getLogger(__name__)


@dataclass
class SFTConfig:
    steps: int = 3000
    batch_size: int = 64
    learning_rate: float = 1e-3
    warmup: int = 100
    weight_decay: float = 0.0
    log_every: int = 50
    t_min: float = 1e-3


class SFTDiverged(RuntimeError):
    pass


def encode_problems(problems: Sequence[Problem], layout: SequenceLayout) -> np.ndarray:
    return np.array([layout.encode(p) for p in problems], dtype=np.int64)


def sft_loss(params, mcfg: ModelConfig, layout: SequenceLayout, partition: BlockPartition,
             x0: np.ndarray, rngs, t_min: float = 1e-3) -> torch.Tensor:
    x_t, masked, t = corrupt_batch(x0, layout.prompt_len, rngs, mcfg.mask_token_id, t_min)
    x0_t = torch.from_numpy(x0)
    logits = forward_train(x_t, x0_t, partition, layout.prompt_len, params, mcfg)
    return mdm_loss_batch(logits, x0_t, masked, t)


def train_sft(params, mcfg: ModelConfig, layout: SequenceLayout, problems: Sequence[Problem],
              block_size: int, cfg: SFTConfig, seed: int, optimizer=None, start_step: int = 0,
              on_log: Callable[[dict], None] | None = None):
    """Run ``cfg.steps - start_step`` AdamW steps; returns the optimizer.

    Batches and corruptions are keyed by ``(seed, step, row)`` so a resumed run
    continues the exact same stream.
    """
    data = encode_problems(problems, layout)
    part = sequence_partition(layout.prompt_len, BlockPartition.aligned(layout.response_len, block_size))
    leaves = [params[k] for k in sorted(params)]
    for p in leaves:
        p.requires_grad_(True)
    if optimizer is None:
        optimizer = torch.optim.AdamW(leaves, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    window = []
    for step in range(start_step, cfg.steps):
        lr = cfg.learning_rate * min(1.0, (step + 1) / max(1, cfg.warmup))
        for g in optimizer.param_groups:
            g["lr"] = lr
        rows = rng_for(seed, "data", step).integers(0, len(data), cfg.batch_size)
        rngs = [rng_for(seed, "corruption", step, i) for i in range(cfg.batch_size)]
        loss = sft_loss(params, mcfg, layout, part, data[rows], rngs, cfg.t_min)
        if not math.isfinite(float(loss.detach())):
            raise SFTDiverged(f"non-finite loss at step {step}")
        grads = nx.backward(loss, params)
        for name, p in params.items():
            p.grad = grads[name]
        torch.nn.utils.clip_grad_norm_(leaves, 1.0)
        optimizer.step()
        optimizer.zero_grad(set_to_none=True)
        window.append(float(loss.detach()) / layout.response_len)
        if on_log is not None and ((step + 1) % cfg.log_every == 0 or step + 1 == cfg.steps):
            on_log({"step": step + 1, "loss_per_token": float(np.mean(window)), "lr": lr})
            window = []
    return optimizer
