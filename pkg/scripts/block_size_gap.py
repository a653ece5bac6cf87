"""Greedy accuracy at several block sizes along a warm-up run at a fixed B0.

Shows how far a model trained with one block size transfers to larger blocks
at inference, and whether the confidence threshold matters.

    python scripts/block_size_gap.py --steps 2500 --every 250
"""

import argparse
import csv
import sys

import torch

from mdmlab.evaluate import greedy_accuracy
from mdmlab.model import ModelConfig, init_params
from mdmlab.sft import SFTConfig, train_sft
from mdmlab.tasks import VOCAB, DatasetSpec, SequenceLayout, generate_dataset, split_of


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--steps", type=int, default=2500)
    ap.add_argument("--every", type=int, default=250)
    ap.add_argument("--B0", type=int, default=2)
    ap.add_argument("--blocks", type=int, nargs="+", default=[1, 2, 4, 8])
    ap.add_argument("--etas", type=float, nargs="+", default=[0.9, 1.0])
    ap.add_argument("--val-size", type=int, default=200)
    args = ap.parse_args()
    torch.set_num_threads(1)

    layout = SequenceLayout(8, 8)
    mcfg = ModelConfig(vocab_size=len(VOCAB), max_len=layout.length)
    probs = generate_dataset(DatasetSpec(count=5000, answer_width=3), seed=0)
    train, val = split_of(probs, "train"), split_of(probs, "validation")[: args.val_size]
    params = init_params(mcfg, 0)
    cols = [f"B{B}_eta{eta}" for B in args.blocks for eta in args.etas]
    w = csv.writer(sys.stdout)
    w.writerow(["step", *cols])
    opt = None
    for stop in range(0, args.steps, args.every):
        end = stop + args.every
        opt = train_sft(params, mcfg, layout, train, args.B0, SFTConfig(steps=end), seed=0,
                        optimizer=opt, start_step=stop)
        accs = [greedy_accuracy(val, params, mcfg, layout, B, eta) for B in args.blocks for eta in args.etas]
        w.writerow([end, *(f"{a:.3f}" for a in accs)])
        sys.stdout.flush()


if __name__ == "__main__":
    main()
