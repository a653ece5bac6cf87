"""Trajectory-aware policy optimization over denoising trajectories.

Each trajectory step ``t`` finalizes a set of tokens ``tau(t)``. The surrogate
averages the clipped ratio term within a step and sums over steps; ratios are
recomputed by replaying the exact decode state that produced each step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from . import numeric as nx
from .decoder import Trajectory, scaled_logprobs
from .model import ModelConfig, forward

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epsilon: float = 0.2
    beta: float = 0.01
    learning_rate: float = 3e-4
    group_size: int = 8
    batch_prompts: int = 32
    gamma: float = 1.0
    lam: float = 0.95
    advantage_mode: str = "sequence"   # sequence | step_gae
    value_coef: float = 0.5
    weight_decay: float = 0.0
    max_grad_norm: float = 1.0         # 0 disables clipping
    chunk_states: int = 2048

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ValueError("gamma and lambda must lie in [0, 1]")
        if self.advantage_mode not in ("sequence", "step_gae"):
            raise ValueError(f"unknown advantage_mode {self.advantage_mode!r}")


@dataclass
class RolloutBatch:
    trajectories: list[Trajectory]
    rewards: np.ndarray                       # [n_traj] in {0, 1}
    groups: list[list[int]]                   # trajectory indices per prompt
    advantages: list[np.ndarray] = field(default_factory=list)   # per trajectory, one per step

    @property
    def partition(self):
        return self.trajectories[0].partition if self.trajectories else None

    def check_partition(self) -> None:
        parts = {t.partition.boundaries for t in self.trajectories}
        if len(parts) > 1:
            raise ValueError("rollout batch mixes block partitions")


# ----------------------------------------------------------------------------
# advantages


def group_advantages(rewards) -> np.ndarray:
    """``(r - mean) / (std + 1e-6)`` with the population standard deviation."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("group-relative advantages need at least 2 samples")
    return (r - r.mean()) / (r.std() + 1e-6)


def gae_step_advantages(step_rewards, values, gamma: float, lam: float) -> np.ndarray:
    """GAE over denoising steps. ``values`` has one extra terminal entry."""
    r = np.asarray(step_rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if v.shape != (r.size + 1,):
        raise ValueError(f"need {r.size + 1} values, got {v.shape}")
    adv = np.zeros_like(r)
    running = 0.0
    for t in range(r.size - 1, -1, -1):
        delta = r[t] + gamma * v[t + 1] - v[t]
        running = delta + gamma * lam * running
        adv[t] = running
    return adv


def clipped_term(rho, adv, epsilon: float):
    """``min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)``; works on floats or tensors."""
    if isinstance(rho, torch.Tensor):
        return torch.minimum(rho * adv, torch.clamp(rho, 1 - epsilon, 1 + epsilon) * adv)
    return min(rho * adv, min(max(rho, 1 - epsilon), 1 + epsilon) * adv)


def make_batch(trajectories: Sequence[Trajectory], rewards, group_size: int) -> RolloutBatch:
    """Group consecutive trajectories by prompt and broadcast sequence advantages."""
    trajectories = list(trajectories)
    rewards = np.asarray(rewards, dtype=np.float64)
    if len(trajectories) != rewards.size:
        raise ValueError("one reward per trajectory required")
    groups: dict[int, list[int]] = {}
    for i, tr in enumerate(trajectories):
        groups.setdefault(tr.prompt_id, []).append(i)
    batch = RolloutBatch(trajectories, rewards, list(groups.values()))
    batch.check_partition()
    seq_adv = np.zeros(rewards.size)
    for idx in batch.groups:
        if len(idx) < 2:
            raise ValueError(f"group of prompt {trajectories[idx[0]].prompt_id} has fewer than 2 samples")
        seq_adv[idx] = group_advantages(rewards[idx])
    batch.advantages = [np.full(tr.n_steps, seq_adv[i]) for i, tr in enumerate(trajectories)]
    return batch


# ----------------------------------------------------------------------------
# replay


@dataclass
class Replay:
    """Flat per-token view of replayed trajectories."""

    logprobs: torch.Tensor        # [n_tok] under the current params
    logp_rows: torch.Tensor       # [n_tok, V] full scaled log-probabilities
    traj: np.ndarray              # [n_tok] trajectory index
    step: np.ndarray              # [n_tok] 0-based step index within its trajectory
    step_hidden: torch.Tensor | None = None   # [n_steps_total, d] mean final hidden per step
    step_owner: np.ndarray | None = None      # [n_steps_total] trajectory index


def _states(traj: Trajectory, mask_id: int) -> np.ndarray:
    """Decode state before each step: finalized tokens of earlier steps, MASK elsewhere."""
    step_of = traj.step_of()
    t = np.arange(1, traj.n_steps + 1)[:, None]
    return np.where(step_of[None, :] < t, traj.tokens[None, :], mask_id)


def replay(trajectories: Sequence[Trajectory], params: Mapping[str, torch.Tensor],
           mcfg: ModelConfig, with_hidden: bool = False, chunk: int = 2048) -> Replay:
    if not trajectories:
        raise ValueError("no trajectories to replay")
    part = trajectories[0].partition
    if any(t.partition.boundaries != part.boundaries for t in trajectories):
        raise ValueError("trajectories were generated under different block partitions")
    temp = trajectories[0].temperature
    L = part.length
    states, rows, pos, tok, owner, stp, sown = [], [], [], [], [], [], []
    r0 = 0
    for k, tr in enumerate(trajectories):
        if tr.tokens is None or len(tr.tokens) != L:
            raise ValueError(f"trajectory {k} does not match partition length {L}")
        states.append(_states(tr, mcfg.mask_token_id))
        for t, st in enumerate(tr.steps):
            n = len(st.positions)
            rows.append(np.full(n, r0 + t))
            pos.append(st.positions)
            tok.append(st.tokens)
            owner.append(np.full(n, k))
            stp.append(np.full(n, t))
            sown.append(k)
        r0 += tr.n_steps
    states = torch.as_tensor(np.concatenate(states))
    rows = np.concatenate(rows)
    pos = np.concatenate(pos)
    tok = torch.as_tensor(np.concatenate(tok))
    owner = np.concatenate(owner)
    stp = np.concatenate(stp)

    lp_rows, hid = [], []
    for c0 in range(0, len(rows), chunk):
        sel = slice(c0, c0 + chunk)
        # only the state rows these tokens need
        uniq, inv = np.unique(rows[sel], return_inverse=True)
        logits, h = forward(states[uniq], part, params, mcfg, return_hidden=True)
        r_idx = torch.as_tensor(inv)
        p_idx = torch.as_tensor(pos[sel])
        lp_rows.append(scaled_logprobs(logits[r_idx, p_idx], temp, mcfg.mask_token_id))
        if with_hidden:
            hid.append((uniq, inv, h[r_idx, p_idx]))
    logp_rows = torch.cat(lp_rows)
    logprobs = nx.gather(logp_rows, tok)

    step_hidden = None
    if with_hidden:
        n_steps = r0
        d = mcfg.d_model
        sums = torch.zeros(n_steps, d)
        counts = torch.zeros(n_steps)
        off = 0
        for uniq, inv, h in hid:
            n = h.shape[0]
            rr = torch.as_tensor(rows[off:off + n])
            sums = sums.index_add(0, rr, h)
            counts = counts.index_add(0, rr, torch.ones(n))
            off += n
        step_hidden = sums / counts[:, None]
    return Replay(logprobs, logp_rows, owner, stp, step_hidden, np.asarray(sown))


def policy_logprobs(traj: Trajectory, params, mcfg: ModelConfig) -> torch.Tensor:
    """Per-token log-probabilities of ``traj`` under ``params``, in step order."""
    return replay([traj], params, mcfg).logprobs


def snapshot_logprobs(trajectories: Sequence[Trajectory]) -> torch.Tensor:
    return torch.as_tensor(np.concatenate([st.logprobs for tr in trajectories for st in tr.steps]))


def snapshot_logp_rows(trajectories: Sequence[Trajectory]) -> torch.Tensor:
    for tr in trajectories:
        for st in tr.steps:
            if st.old_logits is None:
                raise ValueError(f"trajectory of prompt {tr.prompt_id} lacks cached old logits")
    return torch.as_tensor(np.concatenate([st.old_logits for tr in trajectories for st in tr.steps]))


# ----------------------------------------------------------------------------
# objective


def _categorical_kl(new_rows: torch.Tensor, old_rows: torch.Tensor) -> torch.Tensor:
    """Per-row ``KL(new || old)`` from log-probability rows."""
    return (torch.exp(new_rows) * (new_rows - old_rows)).sum(dim=-1)


def kl_term(batch: RolloutBatch, params, mcfg: ModelConfig, rep: Replay | None = None) -> torch.Tensor:
    """Mean per-token ``KL(pi_theta || pi_old)`` over every decoded token."""
    rep = rep or replay(batch.trajectories, params, mcfg)
    old = snapshot_logp_rows(batch.trajectories)
    return _categorical_kl(rep.logp_rows, old).mean()


def _token_weights(batch: RolloutBatch, rep: Replay) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-token advantage and ``1 / |tau(t)|`` weight."""
    adv = np.empty(len(rep.traj))
    w = np.empty(len(rep.traj))
    off = 0
    for k, tr in enumerate(batch.trajectories):
        for t, st in enumerate(tr.steps):
            n = len(st.positions)
            adv[off:off + n] = batch.advantages[k][t]
            w[off:off + n] = 1.0 / n
            off += n
    return torch.as_tensor(adv), torch.as_tensor(w)


def objective_terms(batch: RolloutBatch, params, mcfg: ModelConfig, cfg: TrainConfig,
                    rep: Replay | None = None) -> dict:
    """Surrogate ``J`` (without KL), KL, and diagnostics, all as tensors/floats."""
    if not batch.trajectories:
        raise ValueError("empty rollout batch")
    rep = rep or replay(batch.trajectories, params, mcfg)
    old = snapshot_logprobs(batch.trajectories)
    adv, w = _token_weights(batch, rep)
    rho = torch.exp(rep.logprobs - old)
    per_token = clipped_term(rho, adv, cfg.epsilon) * w
    surrogate = per_token.sum() / len(batch.trajectories)
    kl = _categorical_kl(rep.logp_rows, snapshot_logp_rows(batch.trajectories)).mean()
    with torch.no_grad():
        clip_frac = float(((rho - 1).abs() > cfg.epsilon).double().mean())
    return {"surrogate": surrogate, "kl": kl, "rho": rho, "clip_fraction": clip_frac, "replay": rep}


def tracerl_objective(batch: RolloutBatch, params, mcfg: ModelConfig, cfg: TrainConfig) -> torch.Tensor:
    """Loss ``-J`` with ``J = surrogate - beta * KL``."""
    terms = objective_terms(batch, params, mcfg, cfg)
    return -(terms["surrogate"] - cfg.beta * terms["kl"])


def reinforce_loss(batch: RolloutBatch, params, mcfg: ModelConfig) -> torch.Tensor:
    """Vanilla policy-gradient loss with the same step weighting and advantages."""
    rep = replay(batch.trajectories, params, mcfg)
    adv, w = _token_weights(batch, rep)
    return -(rep.logprobs * adv * w).sum() / len(batch.trajectories)


# ----------------------------------------------------------------------------
# value head (step_gae mode)


def step_values(rep: Replay, params) -> torch.Tensor:
    if "value.w" not in params:
        raise ValueError("step_gae advantages need a model built with value_head=True")
    return rep.step_hidden @ params["value.w"] + params["value.b"]


def assign_gae_advantages(batch: RolloutBatch, values: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    """Fill ``batch.advantages`` from terminal rewards and per-step values; returns value targets."""
    targets = np.empty_like(values)
    off = 0
    for k, tr in enumerate(batch.trajectories):
        T = tr.n_steps
        r = np.zeros(T)
        r[-1] = batch.rewards[k]
        v = np.append(values[off:off + T], 0.0)
        a = gae_step_advantages(r, v, cfg.gamma, cfg.lam)
        batch.advantages[k] = a
        targets[off:off + T] = a + v[:-1]
        off += T
    return targets


# ----------------------------------------------------------------------------
# update


def make_optimizer(params: Mapping[str, torch.Tensor], cfg: TrainConfig) -> torch.optim.Optimizer:
    leaves = [params[k] for k in sorted(params)]
    for p in leaves:
        p.requires_grad_(True)
    return torch.optim.AdamW(leaves, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)


def train_step(batch: RolloutBatch, params: Mapping[str, torch.Tensor], mcfg: ModelConfig,
               cfg: TrainConfig, optimizer: torch.optim.Optimizer) -> dict:
    """One AdamW step on ``-J``; skips the update if any gradient is non-finite."""
    for p in params.values():
        p.requires_grad_(True)
    rep = replay(batch.trajectories, params, mcfg, with_hidden=cfg.advantage_mode == "step_gae",
                 chunk=cfg.chunk_states)
    value_loss = None
    if cfg.advantage_mode == "step_gae":
        v = step_values(rep, params)
        targets = assign_gae_advantages(batch, v.detach().numpy(), cfg)
        value_loss = ((v - torch.as_tensor(targets)) ** 2).mean()
    terms = objective_terms(batch, params, mcfg, cfg, rep)
    loss = -(terms["surrogate"] - cfg.beta * terms["kl"])
    total = loss if value_loss is None else loss + cfg.value_coef * value_loss
    grads = nx.backward(total, params)
    finite = all(torch.isfinite(g).all() for g in grads.values())
    metrics = {
        "loss": float(loss.detach()),
        "mean_reward": float(np.mean(batch.rewards)),
        "mean_ratio": float(terms["rho"].detach().mean()),
        "clip_fraction": terms["clip_fraction"],
        "kl": float(terms["kl"].detach()),
        "n_tokens": int(len(rep.traj)),
        "mean_steps": float(np.mean([t.n_steps for t in batch.trajectories])),
        "skipped": not finite,
    }
    if value_loss is not None:
        metrics["value_loss"] = float(value_loss.detach())
    if not finite or not math.isfinite(metrics["loss"]):
        log.warning("non-finite gradient or loss; update skipped")
        metrics["skipped"] = True
        optimizer.zero_grad(set_to_none=True)
        return metrics
    for name, p in params.items():
        p.grad = grads[name]
    if cfg.max_grad_norm:
        metrics["grad_norm"] = float(torch.nn.utils.clip_grad_norm_(list(params.values()), cfg.max_grad_norm))
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return metrics
