"""Command-line entry point: sft | rl | tstar | decode | eval | analyze."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, config_to_dict, dump_config, load_config
from .curriculum import run_curriculum, run_direct
from .decoder import DecodeConfig, decode_batch, read_traces, trace_of, write_traces
from .evaluate import evaluate
from .io import atomic_write_text, int_seed, write_jsonl
from .model import clone_params, init_params, load_checkpoint, save_checkpoint
from .schedule import aggregate_localstrict, export_heatmap, summary_rows
from .sft import SFTDiverged, train_sft
from .tasks import VOCAB, generate_dataset, load_dataset, save_dataset, split_of

log = logging.getLogger("mdmlab")


# ----------------------------------------------------------------------------
# helpers


def _out_dir(cfg: RunConfig, args, name: str) -> Path:
    out = Path(args.out) if args.out else Path(cfg.out_dir) / name
    if out.exists() and any(out.iterdir()) and not getattr(args, "resume", False) and not args.force:
        raise SystemExit(f"error: output directory {out} is not empty (use --force or --resume)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(cfg: RunConfig, args):
    if getattr(args, "dataset", None):
        return load_dataset(args.dataset)
    return generate_dataset(cfg.data, int_seed(cfg.seed, "data"))


def _write_manifest(out: Path, command: str, cfg: RunConfig, files: list[str], extra: dict | None = None):
    man = {"command": command, "seed": cfg.seed, "files": sorted(files), "config": config_to_dict(cfg),
           **(extra or {})}
    atomic_write_text(out / "manifest.json", json.dumps(man, indent=2, sort_keys=True))


def _write_timing(out: Path, started: float):
    atomic_write_text(out / "timing.json", json.dumps({"started": started, "elapsed_s": time.time() - started}))


def _load_ckpt(path: str):
    ck = load_checkpoint(path)
    return ck, clone_params(ck.params)


def _decode_chunk(payload):
    prompts, pids, sids, params, mcfg, layout, dcfg, seed = payload
    torch.set_num_threads(1)
    return decode_batch(prompts, params, mcfg, layout, dcfg, None, seed, pids, sids)


def parallel_decode(prompts, pids, sids, params, mcfg, layout, dcfg, seed, workers: int):
    """Fan decoding out over processes; output order follows the input order."""
    if workers <= 1 or len(prompts) < 2 * workers:
        return decode_batch(prompts, params, mcfg, layout, dcfg, None, seed, pids, sids)
    cut = np.array_split(np.arange(len(prompts)), workers)
    jobs = [([prompts[i] for i in c], [pids[i] for i in c], [sids[i] for i in c],
             params, mcfg, layout, dcfg, seed) for c in cut]
    with ProcessPoolExecutor(workers) as ex:
        parts = list(ex.map(_decode_chunk, jobs))
    return [t for part in parts for t in part]


# ----------------------------------------------------------------------------
# subcommands


def cmd_sft(cfg: RunConfig, args) -> Path:
    started = time.time()
    out = _out_dir(cfg, args, "sft")
    problems = _dataset(cfg, args)
    save_dataset(problems, out / "dataset.jsonl")
    train = split_of(problems, "train")
    ck_path = out / "checkpoint.npz"
    curve_path = out / "loss_curve.csv"
    rows: list[dict] = []
    optimizer, start = None, 0
    params = init_params(cfg.model, int_seed(cfg.seed, "init"))
    if args.resume and ck_path.exists():
        ck = load_checkpoint(ck_path)
        params = clone_params(ck.params)
        start = ck.step
        if curve_path.exists():
            rows = [r for r in csv.DictReader(curve_path.open()) if int(r["step"]) <= start]
        leaves = [params[k] for k in sorted(params)]
        for p in leaves:
            p.requires_grad_(True)
        optimizer = torch.optim.AdamW(leaves, lr=cfg.sft.learning_rate, weight_decay=cfg.sft.weight_decay)
        if ck.optimizer_state:
            optimizer.load_state_dict(ck.optimizer_state)
        log.info("resuming sft at step %d", start)

    block = cfg.curriculum.B0
    seed = int_seed(cfg.seed, "sft")

    def flush():
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["step", "loss_per_token", "lr"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        atomic_write_text(curve_path, buf.getvalue())

    def on_log(rec):
        rows.append({k: rec[k] for k in ("step", "loss_per_token", "lr")})

    try:
        for stop in range(start, cfg.sft.steps, args.ckpt_every):
            end = min(cfg.sft.steps, stop + args.ckpt_every)
            sub = type(cfg.sft)(**{**cfg.sft.__dict__, "steps": end})
            optimizer = train_sft(params, cfg.model, cfg.layout, train, block, sub, seed,
                                  optimizer=optimizer, start_step=stop, on_log=on_log)
            save_checkpoint(ck_path, cfg.model, params, step=end, seed=cfg.seed,
                            optimizer_state=optimizer.state_dict(), extra={"block_size": block})
            # weights-only snapshots so later stages can start from an earlier point
            save_checkpoint(out / "checkpoints" / f"step_{end:06d}.npz", cfg.model, params, step=end,
                            seed=cfg.seed, extra={"block_size": block})
            flush()
            log.info("sft step %d loss/token %.4f", end, float(rows[-1]["loss_per_token"]) if rows else float("nan"))
    except SFTDiverged as e:
        log.error("%s; last good checkpoint kept at %s", e, ck_path)
        flush()
        raise SystemExit(2)
    if start >= cfg.sft.steps and not ck_path.exists():
        save_checkpoint(ck_path, cfg.model, params, step=start, seed=cfg.seed)
    atomic_write_text(out / "config.yaml", dump_config(cfg))
    snapshots = sorted(str(p.relative_to(out)) for p in (out / "checkpoints").glob("step_*.npz"))
    _write_manifest(out, "sft", cfg, ["dataset.jsonl", "checkpoint.npz", "loss_curve.csv", "config.yaml",
                                      *snapshots],
                    {"block_size": block})
    _write_timing(out, started)
    return out


def cmd_rl(cfg: RunConfig, args) -> Path:
    started = time.time()
    B = args.block_size or cfg.rl.block_size
    out = _out_dir(cfg, args, f"rl-B{B}")
    _, params = _load_ckpt(args.checkpoint)
    problems = _dataset(cfg, args)
    res = run_direct(params, cfg.model, cfg.layout, split_of(problems, "train"), split_of(problems, "validation"),
                     B, cfg.rl.n_batches, cfg.rl.val_every, cfg.train, cfg.decode, int_seed(cfg.seed, "rl"),
                     out, cfg.rl.val_size, resume=args.resume)
    atomic_write_text(out / "config.yaml", dump_config(cfg))
    _write_timing(out, started)
    if res["status"] != "done":
        raise SystemExit(2)
    return out


def cmd_tstar(cfg: RunConfig, args) -> Path:
    started = time.time()
    out = _out_dir(cfg, args, "tstar")
    _, params = _load_ckpt(args.checkpoint)
    problems = _dataset(cfg, args)
    res = run_curriculum(params, cfg.model, cfg.layout, split_of(problems, "train"),
                         split_of(problems, "validation"), cfg.curriculum, cfg.train, cfg.decode,
                         int_seed(cfg.seed, "tstar"), out, resume=args.resume)
    atomic_write_text(out / "config.yaml", dump_config(cfg))
    _write_timing(out, started)
    if res["status"] != "done":
        raise SystemExit(2)
    return out


def _decode_cfg(cfg: RunConfig, args) -> DecodeConfig:
    d = cfg.decode
    return DecodeConfig(
        eta=d.eta if args.eta is None else args.eta,
        block_size=args.block_size or d.block_size,
        max_blocks=d.max_blocks,
        max_steps_per_block=d.max_steps_per_block,
        temperature=d.temperature if args.temperature is None else args.temperature,
        mode=args.mode or d.mode,
    )


def cmd_decode(cfg: RunConfig, args) -> Path:
    started = time.time()
    out = _out_dir(cfg, args, "decode")
    ck, params = _load_ckpt(args.checkpoint)
    dcfg = _decode_cfg(cfg, args)
    if args.prompts:
        path = Path(args.prompts)
        if not path.exists():
            raise SystemExit(f"error: prompts file not found: {path}")
        texts = [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]
    else:
        texts = [p.prompt for p in split_of(_dataset(cfg, args), args.split)][: args.limit or None]
    prompts = [cfg.layout.encode_prompt(t) for t in texts]
    n = args.samples
    enc = [p for p in prompts for _ in range(n)]
    pids = [i for i in range(len(prompts)) for _ in range(n)]
    sids = [j for _ in prompts for j in range(n)]
    trajs = parallel_decode(enc, pids, sids, params, ck.config, cfg.layout, dcfg,
                            int_seed(cfg.seed, "decode"), args.workers or cfg.workers)
    tag = args.tag or Path(args.checkpoint).stem
    write_jsonl(out / "responses.jsonl", [
        {"prompt_id": t.prompt_id, "sample_id": t.sample_id, "prompt": texts[t.prompt_id],
         "response": VOCAB.decode(t.response_ids()), "steps": t.n_steps, "truncated": t.truncated}
        for t in trajs])
    write_traces(out / "traces.jsonl", [trace_of(t, dcfg.block_size, dcfg.eta, tag) for t in trajs])
    _write_manifest(out, "decode", cfg, ["responses.jsonl", "traces.jsonl"],
                    {"checkpoint": str(args.checkpoint), "decode": dcfg.__dict__})
    _write_timing(out, started)
    return out


def cmd_eval(cfg: RunConfig, args) -> Path:
    started = time.time()
    out = _out_dir(cfg, args, "eval")
    ck, params = _load_ckpt(args.checkpoint)
    problems = split_of(_dataset(cfg, args), args.split or cfg.eval.split)
    size = args.limit or cfg.eval.size
    if size:
        problems = problems[:size]
    n = args.n or cfg.eval.n
    ks = tuple(args.k) if args.k else cfg.eval.k
    dcfg = _decode_cfg(cfg, args)
    if n > 1 and not args.mode:
        dcfg.mode = "sample"
    tag = args.tag or Path(args.checkpoint).stem
    res = evaluate(problems, params, ck.config, cfg.layout, dcfg, n=n, ks=ks,
                   seed=int_seed(cfg.seed, "eval"), model_tag=tag)
    report = {**res["report"], "split": args.split or cfg.eval.split}
    atomic_write_text(out / "eval_report.json", json.dumps(report, indent=2, sort_keys=True))
    write_traces(out / "traces.jsonl", res["traces"])
    _write_manifest(out, "eval", cfg, ["eval_report.json", "traces.jsonl"], {"checkpoint": str(args.checkpoint)})
    _write_timing(out, started)
    print(json.dumps(report, sort_keys=True))
    return out


def cmd_analyze(cfg: RunConfig, args) -> Path:
    started = time.time()
    out = _out_dir(cfg, args, "analyze")
    traces = []
    for f in args.traces:
        if not Path(f).exists():
            raise SystemExit(f"error: trace file not found: {f}")
        try:
            traces.extend(read_traces(f))
        except (ValueError, KeyError) as e:
            raise SystemExit(f"error: corrupt trace file {f}: {e}")
    if not traces:
        raise SystemExit("error: no traces found")
    rows = summary_rows(traces)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    atomic_write_text(out / "localstrict.csv", buf.getvalue())
    export_heatmap(traces, out / "heatmaps.csv", width=args.width)
    agg = aggregate_localstrict(traces)
    summary = {"mean_localstrict": agg["mean"], "std_localstrict": agg["std"], "trace_count": agg["count"],
               "mean_length": agg["mean_length"], "per_trace": agg["values"], "lengths": agg["lengths"]}
    atomic_write_text(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True))
    _write_manifest(out, "analyze", cfg, ["localstrict.csv", "heatmaps.csv", "summary.json"],
                    {"inputs": [str(f) for f in args.traces]})
    _write_timing(out, started)
    for r in rows:
        print(f"{r['model_tag'] or '-':<20} B={r['B']:<3} LocalStrict={r['mean_localstrict']:.3f} "
              f"(n={r['trace_count']})")
    return out


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mdmlab", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run config (defaults when omitted)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. --set train.beta=0.0")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (default: <out_dir>/<command>)")
        p.add_argument("--force", action="store_true", help="allow a non-empty output directory")
        p.add_argument("--dataset", help="dataset .jsonl (default: regenerate from config)")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = common(sub.add_parser("sft", help="masked-diffusion warm-up at B0"))
    p.add_argument("--resume", action="store_true")
    p.add_argument("--ckpt-every", type=int, default=500)
    p.set_defaults(func=cmd_sft)

    for name, fn, helptext in (("rl", cmd_rl, "direct TraceRL at a fixed block size"),
                               ("tstar", cmd_tstar, "progressive block-size curriculum")):
        p = common(sub.add_parser(name, help=helptext))
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--resume", action="store_true")
        if name == "rl":
            p.add_argument("--block-size", type=int)
        p.set_defaults(func=fn)

    for name, fn in (("decode", cmd_decode), ("eval", cmd_eval)):
        p = common(sub.add_parser(name, help=f"{name} with a checkpoint"))
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--block-size", type=int)
        p.add_argument("--eta", type=float)
        p.add_argument("--temperature", type=float)
        p.add_argument("--mode", choices=["greedy", "sample"])
        p.add_argument("--split", default=None if name == "eval" else "validation")
        p.add_argument("--limit", type=int, default=0)
        p.add_argument("--tag", help="model tag written into traces")
        p.add_argument("--workers", type=int, default=0)
        if name == "decode":
            p.add_argument("--prompts", help="text file, one prompt per line")
            p.add_argument("--samples", type=int, default=1)
        else:
            p.add_argument("--n", type=int)
            p.add_argument("--k", type=int, nargs="+")
        p.set_defaults(func=fn)

    p = common(sub.add_parser("analyze", help="LocalStrict table and heatmap grids"))
    p.add_argument("traces", nargs="+")
    p.add_argument("--width", type=int, default=8)
    p.set_defaults(func=cmd_analyze)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    try:
        cfg = load_config(args.config, overrides)
    except (FileNotFoundError, ValueError) as e:
        raise SystemExit(f"error: {e}")
    try:
        args.func(cfg, args)
    except FileNotFoundError as e:
        raise SystemExit(f"error: {e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
