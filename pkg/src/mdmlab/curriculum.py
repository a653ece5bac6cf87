"""Progressive block-size scaling: RL on aligned blocks, RL on half-shifted
blocks, then double the block size. Also hosts the fixed-B RL baseline, which
runs through the same phase machinery.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .decoder import DecodeConfig
from .evaluate import evaluate, rollout
from .io import append_jsonl, atomic_write_text, int_seed, read_jsonl, rng_for, write_jsonl
from .model import BlockPartition, ModelConfig, load_checkpoint, save_checkpoint, sequence_partition
from .tasks import Problem, SequenceLayout
from .tracerl import TrainConfig, make_batch, make_optimizer, train_step

log = logging.getLogger(__name__)


@dataclass
class CurriculumConfig:
    B0: int = 2
    Bhat: int = 8
    batches_per_stage: int = 8
    val_size: int = 200

    def __post_init__(self):
        for name in ("B0", "Bhat"):
            v = getattr(self, name)
            if v < 1 or v & (v - 1):
                raise ValueError(f"{name}={v} is not a power of two")
        if self.B0 > self.Bhat:
            raise ValueError("B0 must not exceed Bhat")
        if self.batches_per_stage < 2:
            raise ValueError("need at least 2 batches per stage (one per phase)")


def split(batch_ids: Sequence[int], seed: int) -> tuple[list[int], list[int]]:
    """Seeded shuffle, then halves; the first half gets the odd element."""
    ids = list(batch_ids)
    if not ids:
        raise ValueError("cannot split an empty batch")
    perm = np.random.default_rng(seed).permutation(len(ids))
    cut = math.ceil(len(ids) / 2)
    return [ids[i] for i in perm[:cut]], [ids[i] for i in perm[cut:]]


def shift_partition(length: int, block_size: int, delta: int) -> BlockPartition:
    """Blocks ``[0, d), [d, d+B), [d+B, d+2B), ...`` with a final remainder block."""
    if delta != block_size // 2 or (block_size > 1 and 2 * delta != block_size):
        raise ValueError(f"shift must be B/2, got delta={delta} for B={block_size}")
    if delta == 0:
        return BlockPartition(BlockPartition.aligned(length, block_size).boundaries, block_size, "shifted")
    if length <= delta:
        return BlockPartition((0, length), block_size, "shifted")
    bounds = [0] + list(range(delta, length, block_size)) + [length]
    return BlockPartition(tuple(sorted(set(bounds))), block_size, "shifted")


def expand(block_size: int, max_response: int) -> tuple[int, bool]:
    """Double the block size; the flag marks that the doubled size no longer fits."""
    if block_size < 1 or block_size & (block_size - 1):
        raise ValueError(f"block size {block_size} is not a power of two")
    nb = 2 * block_size
    return nb, nb > max_response


def merge_pairs(partition: BlockPartition) -> BlockPartition:
    """Merge adjacent aligned blocks pairwise."""
    b = partition.boundaries
    bounds = tuple(b[::2]) + ((b[-1],) if (len(b) - 1) % 2 else ())
    return BlockPartition(bounds, 2 * partition.block_size, partition.tag)


def stage_schedule(B0: int, Bhat: int) -> list[int]:
    out, B = [], B0
    while B <= Bhat:
        out.append(B)
        B *= 2
    return out


@dataclass
class Phase:
    stage: int
    block_size: int
    kind: str                              # aligned | shifted
    batches: list[list[int]] = field(default_factory=list)

    def response_partition(self, response_len: int) -> BlockPartition:
        if self.kind == "shifted":
            return shift_partition(response_len, self.block_size, self.block_size // 2)
        return BlockPartition.aligned(response_len, self.block_size)


def _chunks(ids: list[int], n: int) -> list[list[int]]:
    size = math.ceil(len(ids) / n)
    return [ids[i:i + size] for i in range(0, len(ids), size)]


def plan_curriculum(cfg: CurriculumConfig, batch_prompts: int, n_train: int, seed: int) -> list[Phase]:
    """Per stage: draw one stage batch, split it, aligned phase then shifted phase."""
    phases = []
    n_aligned = math.ceil(cfg.batches_per_stage / 2)
    n_shifted = cfg.batches_per_stage - n_aligned
    for s, B in enumerate(stage_schedule(cfg.B0, cfg.Bhat)):
        total = cfg.batches_per_stage * batch_prompts
        d = rng_for(seed, "stage_data", s).choice(n_train, size=total, replace=total > n_train).tolist()
        d1, d2 = split(d, int_seed(seed, "split", s))
        phases.append(Phase(s, B, "aligned", _chunks(d1, n_aligned)))
        phases.append(Phase(s, B, "shifted", _chunks(d2, n_shifted)))
    return phases


def plan_direct(block_size: int, n_batches: int, batch_prompts: int, n_train: int, seed: int,
                val_every: int) -> list[Phase]:
    """Fixed-B baseline: aligned phases of ``val_every`` batches each."""
    phases = []
    for k in range(0, n_batches, val_every):
        batches = []
        for j in range(k, min(n_batches, k + val_every)):
            batches.append(rng_for(seed, "rl_data", j).choice(n_train, size=batch_prompts, replace=False).tolist())
        phases.append(Phase(len(phases), block_size, "aligned", batches))
    return phases


class PartitionMismatch(RuntimeError):
    pass


def run_phases(
    phases: Sequence[Phase],
    params: dict[str, torch.Tensor],
    mcfg: ModelConfig,
    layout: SequenceLayout,
    train: Sequence[Problem],
    val: Sequence[Problem],
    tcfg: TrainConfig,
    dcfg: DecodeConfig,
    seed: int,
    out_dir: str | Path,
    run_info: dict | None = None,
    resume: bool = True,
    tag: str = "run",
) -> dict:
    """Execute phases with a checkpoint and a validation record at every boundary.

    Output layout under ``out_dir``: ``checkpoints/phase_XX.npz``,
    ``metrics.jsonl`` (one record per update), ``val_curve.jsonl`` (one record
    per phase) and ``manifest.json``. With ``resume`` an existing manifest is
    picked up at its last completed phase.
    """
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.json"
    metrics_path = out / "metrics.jsonl"
    val_path = out / "val_curve.jsonl"

    optimizer = make_optimizer(params, tcfg)
    val_records: list[dict] = []
    checkpoints: list[str] = []
    global_step, start = 0, 0
    if resume and manifest_path.exists():
        man = json.loads(manifest_path.read_text())
        if man.get("completed_phases", 0) > 0:
            ck = load_checkpoint(out / man["checkpoints"][-1])
            with torch.no_grad():
                for k, v in ck.params.items():
                    params[k].copy_(v)
            optimizer.load_state_dict(ck.optimizer_state)
            global_step = ck.step
            start = man["completed_phases"]
            checkpoints = man["checkpoints"][:start]
            val_records = [r for r in read_jsonl(val_path) if r["phase_index"] < start]
            kept = [r for r in read_jsonl(metrics_path) if r["step"] <= global_step] if metrics_path.exists() else []
            write_jsonl(metrics_path, kept)
            log.info("resuming %s at phase %d (step %d)", tag, start, global_step)
    elif metrics_path.exists():
        metrics_path.unlink()

    status = "running"
    manifest = {
        "tag": tag, "seed": seed, **(run_info or {}),
        "phases": [{"stage": p.stage, "B": p.block_size, "kind": p.kind, "batches": len(p.batches)}
                   for p in phases],
    }

    def write_manifest():
        manifest.update(status=status, completed_phases=len(checkpoints), checkpoints=checkpoints,
                        validation=val_records, final_step=global_step)
        atomic_write_text(manifest_path, json.dumps(manifest, indent=2, sort_keys=True))

    rollout_cfg = DecodeConfig(eta=dcfg.eta, block_size=1, temperature=dcfg.temperature, mode="sample")
    for pi in range(start, len(phases)):
        ph = phases[pi]
        rpart = ph.response_partition(layout.response_len)
        full = sequence_partition(layout.prompt_len, rpart)
        rcfg = DecodeConfig(**{**asdict(rollout_cfg), "block_size": ph.block_size})
        failed = False
        for ids in ph.batches:
            global_step += 1
            ro = rollout([train[i] for i in ids], ids, params, mcfg, layout, rcfg,
                         tcfg.group_size, int_seed(seed, "rollout", global_step), rpart)
            batch = make_batch(ro.trajectories, ro.rewards, tcfg.group_size)
            if batch.partition.boundaries != full.boundaries:
                raise PartitionMismatch(f"rollout partition {batch.partition.boundaries} != phase {full.boundaries}")
            m = train_step(batch, params, mcfg, tcfg, optimizer)
            append_jsonl(metrics_path, {"step": global_step, "stage": ph.stage, "B": ph.block_size,
                                        "phase": ph.kind, **m})
            if m["skipped"]:
                failed = True
                break
        if failed:
            status = "failed"
            log.error("%s: non-finite update in phase %d; keeping last checkpoint", tag, pi)
            write_manifest()
            break
        vcfg = DecodeConfig(eta=dcfg.eta, block_size=ph.block_size, mode="greedy")
        acc = evaluate(list(val), params, mcfg, layout, vcfg)["report"]["pass@1"]
        val_records.append({"phase_index": pi, "stage": ph.stage, "B": ph.block_size, "phase": ph.kind,
                            "step": global_step, "val_pass1": acc})
        write_jsonl(val_path, val_records)
        ck = f"checkpoints/phase_{pi:02d}.npz"
        save_checkpoint(out / ck, mcfg, params, step=global_step, seed=seed,
                        optimizer_state=optimizer.state_dict(),
                        extra={"phase_index": pi, "stage": ph.stage, "B": ph.block_size, "phase": ph.kind})
        checkpoints.append(ck)
        log.info("%s phase %d (B=%d %s) step %d val pass@1 %.3f", tag, pi, ph.block_size, ph.kind,
                 global_step, acc)
        write_manifest()
    else:
        status = "done"
        write_manifest()
    return {"status": status, "val_curve": val_records, "checkpoints": checkpoints,
            "final_step": global_step, "params": params}


def run_curriculum(params, mcfg: ModelConfig, layout: SequenceLayout, train: Sequence[Problem],
                   val: Sequence[Problem], ccfg: CurriculumConfig, tcfg: TrainConfig,
                   dcfg: DecodeConfig, seed: int, out_dir, resume: bool = True) -> dict:
    if ccfg.Bhat > layout.response_len:
        raise ValueError(f"Bhat={ccfg.Bhat} exceeds response length {layout.response_len}")
    phases = plan_curriculum(ccfg, tcfg.batch_prompts, len(train), seed)
    info = {"B0": ccfg.B0, "Bhat": ccfg.Bhat, "batches_per_stage": ccfg.batches_per_stage,
            "stages": stage_schedule(ccfg.B0, ccfg.Bhat)}
    return run_phases(phases, params, mcfg, layout, train, val[: ccfg.val_size], tcfg, dcfg, seed,
                      out_dir, info, resume, tag="tstar")


def run_direct(params, mcfg: ModelConfig, layout: SequenceLayout, train: Sequence[Problem],
               val: Sequence[Problem], block_size: int, n_batches: int, val_every: int,
               tcfg: TrainConfig, dcfg: DecodeConfig, seed: int, out_dir, val_size: int = 200,
               resume: bool = True) -> dict:
    phases = plan_direct(block_size, n_batches, tcfg.batch_prompts, len(train), seed, val_every)
    info = {"B": block_size, "n_batches": n_batches, "val_every": val_every}
    return run_phases(phases, params, mcfg, layout, train, val[:val_size], tcfg, dcfg, seed,
                      out_dir, info, resume, tag=f"rl-B{block_size}")
