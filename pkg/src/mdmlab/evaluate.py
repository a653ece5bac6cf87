"""Rollouts against verifiable problems and pass@k evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch

from .decoder import DecodeConfig, Trajectory, decode_batch, trace_of
from .model import BlockPartition, ModelConfig
from .tasks import VOCAB, Problem, SequenceLayout, pass_at_k, verify


@dataclass
class Rollout:
    trajectories: list[Trajectory]
    rewards: np.ndarray
    responses: list[str]


def rollout(problems: Sequence[Problem], problem_ids: Sequence[int], params: Mapping[str, torch.Tensor],
            mcfg: ModelConfig, layout: SequenceLayout, dcfg: DecodeConfig, n_samples: int,
            seed: int, partition: BlockPartition | None = None) -> Rollout:
    """``n_samples`` decodes per problem, grouped consecutively, with 0/1 rewards."""
    prompts, pids, sids, owners = [], [], [], []
    for prob, pid in zip(problems, problem_ids):
        enc = layout.encode_prompt(prob.prompt)
        for j in range(n_samples):
            prompts.append(enc)
            pids.append(pid)
            sids.append(j)
            owners.append(prob)
    trajs = decode_batch(prompts, params, mcfg, layout, dcfg, partition, seed, pids, sids)
    responses = [VOCAB.decode(t.response_ids()) for t in trajs]
    rewards = np.array([verify(r, p) for r, p in zip(responses, owners)], dtype=np.float64)
    return Rollout(trajs, rewards, responses)


def evaluate(problems: Sequence[Problem], params, mcfg: ModelConfig, layout: SequenceLayout,
             dcfg: DecodeConfig, n: int = 1, ks: Sequence[int] = (1,), seed: int = 0,
             partition: BlockPartition | None = None, problem_ids: Sequence[int] | None = None,
             model_tag: str = "") -> dict:
    """pass@k report plus the traces of every decode."""
    ids = list(range(len(problems))) if problem_ids is None else list(problem_ids)
    ro = rollout(problems, ids, params, mcfg, layout, dcfg, n, seed, partition)
    correct = ro.rewards.reshape(len(problems), n).sum(axis=1).astype(int)
    report = {
        "model_tag": model_tag,
        "B": dcfg.block_size,
        "n": n,
        "n_problems": len(problems),
        "mode": dcfg.mode,
    }
    for k in ks:
        if k <= n:
            report[f"pass@{k}"] = pass_at_k([(n, int(c)) for c in correct], k)
    traces = [trace_of(t, dcfg.block_size, dcfg.eta, model_tag) for t in ro.trajectories]
    return {"report": report, "traces": traces, "rollout": ro}


def greedy_accuracy(problems: Sequence[Problem], params, mcfg: ModelConfig, layout: SequenceLayout,
                    block_size: int, eta: float = 0.9, partition: BlockPartition | None = None) -> float:
    dcfg = DecodeConfig(eta=eta, block_size=block_size, mode="greedy")
    return evaluate(problems, params, mcfg, layout, dcfg, partition=partition)["report"]["pass@1"]
