"""Curriculum vs. direct RL at the target block size, over several seeds.

Trains (or loads) a warm-up checkpoint, then for each seed runs the curriculum
from B0 to Bhat and direct RL at Bhat with the same number of updates.
Writes ``results.json`` and prints a per-seed table.

    python scripts/block_scaling.py --out runs/scaling --seeds 0 1 2
"""

import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np
import torch

from mdmlab.curriculum import CurriculumConfig, run_curriculum, run_direct
from mdmlab.decoder import DecodeConfig
from mdmlab.evaluate import greedy_accuracy
from mdmlab.model import ModelConfig, clone_params, init_params, load_checkpoint, save_checkpoint
from mdmlab.sft import SFTConfig, train_sft
from mdmlab.tasks import VOCAB, DatasetSpec, SequenceLayout, generate_dataset, split_of
from mdmlab.tracerl import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/scaling")
    ap.add_argument("--checkpoint", help="warm-up checkpoint; trained from scratch when omitted")
    ap.add_argument("--sft-steps", type=int, default=1000)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--B0", type=int, default=2)
    ap.add_argument("--Bhat", type=int, default=8)
    ap.add_argument("--batches-per-stage", type=int, default=8)
    ap.add_argument("--lr", type=float, default=3e-4)
    ap.add_argument("--val-size", type=int, default=200)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    layout = SequenceLayout(8, 8)
    mcfg = ModelConfig(vocab_size=len(VOCAB), max_len=layout.length)
    probs = generate_dataset(DatasetSpec(count=5000, answer_width=3), seed=0)
    train, val = split_of(probs, "train"), split_of(probs, "validation")[: args.val_size]

    ck_path = Path(args.checkpoint) if args.checkpoint else out / "warmup.npz"
    if not ck_path.exists():
        params = init_params(mcfg, 0)
        train_sft(params, mcfg, layout, train, args.B0, SFTConfig(steps=args.sft_steps), seed=0)
        save_checkpoint(ck_path, mcfg, params, step=args.sft_steps)
    warm = load_checkpoint(ck_path).params
    start_acc = {B: greedy_accuracy(val, warm, mcfg, layout, B) for B in (args.B0, args.Bhat)}
    print("warm-up greedy pass@1:", start_acc)

    tcfg = TrainConfig(learning_rate=args.lr)
    ccfg = CurriculumConfig(args.B0, args.Bhat, args.batches_per_stage, args.val_size)
    rows = []
    for seed in args.seeds:
        t0 = time.time()
        cur = run_curriculum(clone_params(warm), mcfg, layout, train, val, ccfg, tcfg, DecodeConfig(), seed,
                             out / f"curriculum_s{seed}", resume=True)
        direct = run_direct(clone_params(warm), mcfg, layout, train, val, args.Bhat, cur["final_step"],
                            args.batches_per_stage // 2, tcfg, DecodeConfig(), seed, out / f"direct_s{seed}",
                            val_size=args.val_size, resume=True)
        curve = [r["val_pass1"] for r in cur["val_curve"]]
        rows.append({
            "seed": seed,
            "curriculum_curve": curve,
            "direct_curve": [r["val_pass1"] for r in direct["val_curve"]],
            "curriculum_final": curve[-1],
            "direct_final": direct["val_curve"][-1]["val_pass1"],
            "largest_drop": max(0.0, max(a - b for a, b in zip(curve, curve[1:]))),
            "updates": cur["final_step"],
            "seconds": time.time() - t0,
        })
    summary = {
        "warmup": {"checkpoint": str(ck_path), "greedy_pass1": start_acc},
        "config": vars(args),
        "runs": rows,
        "median_curriculum": float(np.median([r["curriculum_final"] for r in rows])),
        "median_direct": float(np.median([r["direct_final"] for r in rows])),
    }
    (out / "results.json").write_text(json.dumps(summary, indent=2))
    print(f"{'seed':>4} {'curriculum':>10} {'direct':>8} {'max drop':>9}")
    for r in rows:
        print(f"{r['seed']:>4} {r['curriculum_final']:>10.3f} {r['direct_final']:>8.3f} {r['largest_drop']:>9.3f}")
    print(f"median {summary['median_curriculum']:.3f} vs {summary['median_direct']:.3f}")


if __name__ == "__main__":
    main()
