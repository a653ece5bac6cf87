"""Blockwise confidence-thresholded denoising with full trajectory recording."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from . import numeric as nx
from .io import atomic_write_text, read_jsonl, rng_for
from .model import BlockPartition, ModelConfig, forward, sequence_partition
from .tasks import VOCAB, SequenceLayout

# finite stand-in for -inf so the MASK column never yields NaN gradients
_EXCLUDED_LOGIT = -1e9


@dataclass
class DecodeConfig:
    eta: float = 0.9
    block_size: int = 2
    max_blocks: int = 0            # 0: as many blocks as the response layout has
    max_steps_per_block: int = 0   # 0: no cap; a capped block is force-finalized by argmax
    temperature: float = 1.0
    mode: str = "greedy"           # greedy | sample

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta={self.eta} outside [0, 1]")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.mode not in ("greedy", "sample"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


@dataclass
class Step:
    positions: np.ndarray      # absolute sequence positions finalized at this step
    tokens: np.ndarray
    logprobs: np.ndarray       # under the generating (temperature-scaled) policy
    confidences: np.ndarray
    old_logits: np.ndarray     # [n, V] scaled log-probabilities, cached for KL
    block: int
    forced: bool = False


@dataclass
class Trajectory:
    prompt_id: int
    sample_id: int
    prompt: np.ndarray         # [P] token ids
    partition: BlockPartition  # full-sequence partition (prompt is block 0)
    temperature: float
    steps: list[Step] = field(default_factory=list)
    tokens: np.ndarray | None = None   # [L] final sequence, MASK where never generated
    truncated: bool = False

    @property
    def prompt_len(self) -> int:
        return len(self.prompt)

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def step_of(self) -> np.ndarray:
        """Per sequence position: 0 for the prompt, step index (1-based) or a large sentinel."""
        L = self.partition.length
        out = np.full(L, np.iinfo(np.int64).max // 2, dtype=np.int64)
        out[: self.prompt_len] = 0
        for t, st in enumerate(self.steps, 1):
            out[st.positions] = t
        return out

    def generated_positions(self) -> np.ndarray:
        return np.sort(np.concatenate([s.positions for s in self.steps])) if self.steps else np.zeros(0, int)

    def response_ids(self) -> np.ndarray:
        return self.tokens[self.prompt_len:]


@dataclass
class TraceRecord:
    prompt_id: int
    sample_id: int
    block_size: int
    eta: float
    partition: str
    first_unmask_step: dict[int, int]     # response-relative position -> step (1-based)
    tokens: dict[int, int]
    truncated: bool = False
    model_tag: str = ""
    prompt: str = ""

    @property
    def n_steps(self) -> int:
        return max(self.first_unmask_step.values()) if self.first_unmask_step else 0

    def to_dict(self) -> dict:
        events = [[p, self.first_unmask_step[p], self.tokens[p]] for p in sorted(self.first_unmask_step)]
        return {
            "prompt_id": self.prompt_id, "sample_id": self.sample_id,
            "block_size": self.block_size, "eta": self.eta, "partition": self.partition,
            "events": events, "truncated": self.truncated, "model_tag": self.model_tag,
            "prompt": self.prompt,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TraceRecord":
        steps, toks = {}, {}
        for pos, step, tok in d["events"]:
            if int(pos) in steps:
                raise ValueError(f"duplicate position {pos} in trace of prompt {d.get('prompt_id')}")
            steps[int(pos)] = int(step)
            toks[int(pos)] = int(tok)
        return cls(int(d["prompt_id"]), int(d.get("sample_id", 0)), int(d["block_size"]),
                   float(d["eta"]), d.get("partition", "aligned"), steps, toks,
                   bool(d.get("truncated", False)), d.get("model_tag", ""), d.get("prompt", ""))


def trace_of(traj: Trajectory, block_size: int, eta: float, model_tag: str = "") -> TraceRecord:
    P = traj.prompt_len
    steps, toks = {}, {}
    for t, st in enumerate(traj.steps, 1):
        for p, tok in zip(st.positions, st.tokens):
            steps[int(p) - P] = t
            toks[int(p) - P] = int(tok)
    return TraceRecord(traj.prompt_id, traj.sample_id, block_size, eta, traj.partition.tag,
                       steps, toks, traj.truncated, model_tag, VOCAB.decode(traj.prompt))


def write_traces(path: str | Path, traces: Sequence[TraceRecord]) -> None:
    ordered = sorted(traces, key=lambda r: (r.prompt_id, r.sample_id))
    atomic_write_text(path, "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in ordered))


def read_traces(path: str | Path) -> list[TraceRecord]:
    return [TraceRecord.from_dict(d) for d in read_jsonl(path)]


# ----------------------------------------------------------------------------
# confidence rule


def scaled_logprobs(logits: torch.Tensor, temperature: float, mask_id: int) -> torch.Tensor:
    """Log-probabilities of ``softmax(logits / T)`` with the MASK symbol excluded."""
    z = logits / temperature
    excl = torch.zeros(z.shape[-1], dtype=torch.bool)
    excl[mask_id] = True
    return nx.log_softmax(z.masked_fill(excl, _EXCLUDED_LOGIT))


def confidence_scores(logits: torch.Tensor, masked, temperature: float = 1.0,
                      mask_id: int | None = None) -> torch.Tensor:
    """``c_i = max_v softmax(logits_i / T)_v`` at the positions in ``masked``.

    ``logits`` is ``[L, V]``; ``masked`` indexes rows.
    """
    rows = logits[torch.as_tensor(masked, dtype=torch.long)]
    if mask_id is None:
        lp = nx.log_softmax(rows / temperature)
    else:
        lp = scaled_logprobs(rows, temperature, mask_id)
    return torch.exp(lp.max(dim=-1).values)


def select_unmask(confidences, positions, eta: float) -> np.ndarray:
    """Positions whose confidence clears ``eta``; falls back to the single most
    confident one (smallest position on ties) when none does.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    pos = np.asarray(positions)
    chosen = pos[conf >= eta]
    if chosen.size:
        return np.sort(chosen)
    best = conf.max()
    return np.array([pos[conf == best].min()])


# ----------------------------------------------------------------------------


def response_partition(layout: SequenceLayout, block_size: int) -> BlockPartition:
    return BlockPartition.aligned(layout.response_len, block_size)


def decode_batch(
    prompts: Sequence[Sequence[int]],
    params: Mapping[str, torch.Tensor],
    mcfg: ModelConfig,
    layout: SequenceLayout,
    cfg: DecodeConfig,
    partition: BlockPartition | None = None,
    seed: int = 0,
    prompt_ids: Sequence[int] | None = None,
    sample_ids: Sequence[int] | None = None,
    chunk: int = 512,
) -> list[Trajectory]:
    """Decode many prompts in lockstep; returns one :class:`Trajectory` each.

    ``partition`` is the response-relative block layout (default: aligned at
    ``cfg.block_size``). In sample mode each sequence draws from its own stream
    keyed by ``(seed, prompt_id, sample_id)``, so results do not depend on how
    prompts are batched.
    """
    n = len(prompts)
    prompt_ids = list(range(n)) if prompt_ids is None else list(prompt_ids)
    sample_ids = [0] * n if sample_ids is None else list(sample_ids)
    rpart = partition or response_partition(layout, cfg.block_size)
    if rpart.length != layout.response_len:
        raise ValueError(f"partition covers {rpart.length} positions, response has {layout.response_len}")
    full = sequence_partition(layout.prompt_len, rpart)
    if full.length > mcfg.max_len:
        raise ValueError(f"prompt_len + response_len = {full.length} exceeds max_len={mcfg.max_len}")
    P, L, MASK = layout.prompt_len, layout.length, mcfg.mask_token_id
    # each step finalizes at least one token, so widest-block steps always suffice
    widest = max(e - s for s, e in rpart.blocks())
    max_steps = cfg.max_steps_per_block or widest
    limited = 0 < cfg.max_steps_per_block < widest
    resp_blocks = [(s + P, e + P) for s, e in rpart.blocks()]
    if cfg.max_blocks:
        resp_blocks = resp_blocks[: cfg.max_blocks]

    tokens = torch.full((n, L), MASK, dtype=torch.long)
    for i, p in enumerate(prompts):
        if len(p) != P:
            raise ValueError(f"prompt {i} has length {len(p)}, layout expects {P}")
        tokens[i, :P] = torch.as_tensor(p)
    trajs = [
        Trajectory(prompt_ids[i], sample_ids[i], np.asarray(prompts[i], dtype=np.int64), full, cfg.temperature)
        for i in range(n)
    ]
    rngs = ([rng_for(seed, "rollout", prompt_ids[i], sample_ids[i]) for i in range(n)]
            if cfg.mode == "sample" else None)
    live = np.ones(n, dtype=bool)

    with torch.no_grad():
        for b_idx, (s, e) in enumerate(resp_blocks, start=1):
            for it in range(max_steps):
                block = tokens[:, s:e]
                todo = np.flatnonzero(live & (block == MASK).any(dim=1).numpy())
                if todo.size == 0:
                    break
                forced = limited and it == max_steps - 1
                for c0 in range(0, todo.size, chunk):
                    idx = todo[c0:c0 + chunk]
                    logits = forward(tokens[idx], full, params, mcfg)[:, s:e]
                    logp = scaled_logprobs(logits, cfg.temperature, MASK)
                    conf = torch.exp(logp.max(dim=-1).values).numpy()
                    argmax = logp.argmax(dim=-1).numpy()
                    if rngs is not None and not forced:
                        u = torch.as_tensor(np.stack([1.0 - rngs[i].random(e - s) for i in idx]))
                        cdf = torch.exp(logp).cumsum(dim=-1)
                        drawn = (cdf < u[..., None] * cdf[..., -1:]).sum(dim=-1)
                        drawn = drawn.clamp_max(logp.shape[-1] - 1).numpy()
                    else:
                        drawn = argmax
                    logp_np = logp.numpy()
                    for r, i in enumerate(idx):
                        m = (tokens[i, s:e] == MASK).numpy()
                        rel = np.flatnonzero(m)
                        if forced:
                            sel = rel
                        else:
                            sel = select_unmask(conf[r, rel], rel, cfg.eta)
                        tok = drawn[r, sel]
                        trajs[i].steps.append(Step(
                            positions=sel + s,
                            tokens=tok.astype(np.int64),
                            logprobs=logp_np[r, sel, tok],
                            confidences=conf[r, sel],
                            old_logits=logp_np[r, sel].copy(),
                            block=b_idx,
                            forced=forced,
                        ))
                        tokens[i, sel + s] = torch.as_tensor(tok)
            done = (tokens[:, s:e] == VOCAB.EOS).any(dim=1).numpy()
            live &= ~done

    for i, tr in enumerate(trajs):
        tr.tokens = tokens[i].numpy().copy()
        tr.truncated = not (tr.response_ids() == VOCAB.EOS).any()
    return trajs


def decode(prompt: Sequence[int], params, mcfg: ModelConfig, layout: SequenceLayout,
           cfg: DecodeConfig, seed: int = 0, partition: BlockPartition | None = None,
           prompt_id: int = 0, sample_id: int = 0):
    """Single-prompt decode: ``(response text, Trajectory, TraceRecord)``."""
    (traj,) = decode_batch([prompt], params, mcfg, layout, cfg, partition, seed, [prompt_id], [sample_id])
    trace = trace_of(traj, cfg.block_size, cfg.eta)
    return VOCAB.decode(traj.response_ids()), traj, trace
