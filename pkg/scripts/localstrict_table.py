"""LocalStrict of greedy decodes for several checkpoints and block sizes.

    python scripts/localstrict_table.py sft=runs/default/sft/checkpoint.npz \
        tstar=runs/default/tstar/checkpoints/phase_05.npz --blocks 1 2 4 8

Prints one row per (model, B) and writes heatmap grids next to ``--out``.
"""

import argparse
from pathlib import Path

import torch

from mdmlab.decoder import DecodeConfig, write_traces
from mdmlab.evaluate import evaluate
from mdmlab.model import load_checkpoint
from mdmlab.schedule import export_heatmap, summary_rows
from mdmlab.tasks import DatasetSpec, SequenceLayout, generate_dataset, split_of


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("models", nargs="+", help="tag=checkpoint.npz")
    ap.add_argument("--blocks", type=int, nargs="+", default=[1, 2, 4, 8])
    ap.add_argument("--eta", type=float, default=0.9)
    ap.add_argument("--size", type=int, default=200)
    ap.add_argument("--out", default="runs/localstrict")
    args = ap.parse_args()
    torch.set_num_threads(1)

    layout = SequenceLayout(8, 8)
    val = split_of(generate_dataset(DatasetSpec(count=5000, answer_width=3), seed=0), "validation")[: args.size]
    out = Path(args.out)
    traces = []
    for spec in args.models:
        tag, _, path = spec.partition("=")
        ck = load_checkpoint(path)
        for B in args.blocks:
            res = evaluate(val, ck.params, ck.config, layout, DecodeConfig(eta=args.eta, block_size=B),
                           model_tag=tag)
            print(f"{tag:<12} B={B:<2} pass@1={res['report']['pass@1']:.3f}")
            traces += res["traces"]
    write_traces(out / "traces.jsonl", traces)
    export_heatmap(traces, out / "heatmaps.csv")
    print(f"{'model':<12} {'B':>2} {'LocalStrict':>11} {'traces':>6}")
    for r in summary_rows(traces):
        print(f"{r['model_tag']:<12} {r['B']:>2} {r['mean_localstrict']:>11.3f} {r['trace_count']:>6}")


if __name__ == "__main__":
    main()
