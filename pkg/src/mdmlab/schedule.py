"""Unmasking-order analysis: linearization, LocalStrict and heatmap grids."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .decoder import TraceRecord
from .io import atomic_write_text


@dataclass(frozen=True)
class LinearOrder:
    """``pi[k]`` is the 1-based rank (left to right) of the k-th finalized position."""

    pi: tuple[int, ...]

    def __post_init__(self):
        if sorted(self.pi) != list(range(1, len(self.pi) + 1)):
            raise ValueError(f"not a permutation of 1..{len(self.pi)}: {self.pi}")

    def __len__(self) -> int:
        return len(self.pi)


def linearize(trace: TraceRecord | dict) -> LinearOrder:
    """Sort positions by (first-unmask step, position)."""
    steps = trace.first_unmask_step if isinstance(trace, TraceRecord) else trace
    if not steps:
        raise ValueError("trace has no decoded positions")
    positions = sorted(steps)
    rank = {p: i for i, p in enumerate(positions, 1)}
    order = sorted(positions, key=lambda p: (steps[p], p))
    return LinearOrder(tuple(rank[p] for p in order))


def local_strict(order: LinearOrder | Sequence[int]) -> float:
    """Fraction of events that finalize the leftmost still-masked position."""
    pi = np.asarray(order.pi if isinstance(order, LinearOrder) else order)
    if pi.size == 0:
        raise ValueError("empty order")
    suffix_min = np.minimum.accumulate(pi[::-1])[::-1]
    return float(np.count_nonzero(pi == suffix_min)) / pi.size


def aggregate_localstrict(traces: Sequence[TraceRecord]) -> dict:
    """Unweighted per-trace mean; trace lengths are kept for pooled recomputation."""
    if not traces:
        raise ValueError("no traces")
    vals = np.array([local_strict(linearize(t)) for t in traces])
    lengths = [len(t.first_unmask_step) for t in traces]
    return {
        "mean": float(vals.mean()),
        "std": float(vals.std()),
        "count": len(traces),
        "mean_length": float(np.mean(lengths)),
        "values": vals.tolist(),
        "lengths": lengths,
    }


def heatmap_grid(trace: TraceRecord, width: int = 8) -> np.ndarray:
    """First-unmask steps laid out row-major at ``width`` columns; 0 marks undecoded cells."""
    n = max(trace.first_unmask_step) + 1
    rows = -(-n // width)
    grid = np.zeros(rows * width, dtype=np.int64)
    for p, s in trace.first_unmask_step.items():
        grid[p] = s
    return grid.reshape(rows, width)


def export_heatmap(traces: Sequence[TraceRecord], path: str | Path, width: int = 8) -> list[np.ndarray]:
    """Write all grids to one plain-text CSV file, each preceded by a ``#`` metadata line."""
    if not traces:
        raise ValueError("no traces to export")
    grids, chunks = [], []
    for t in sorted(traces, key=lambda r: (r.prompt_id, r.sample_id)):
        g = heatmap_grid(t, width)
        grids.append(g)
        meta = (f"# prompt_id={t.prompt_id} sample_id={t.sample_id} B={t.block_size} eta={t.eta} "
                f"partition={t.partition} model={t.model_tag or '-'} T={t.n_steps} n={len(t.first_unmask_step)}")
        body = "\n".join(",".join(str(v) for v in row) for row in g)
        chunks.append(meta + "\n" + body + "\n")
    atomic_write_text(path, "\n".join(chunks))
    return grids


def read_heatmaps(path: str | Path) -> list[tuple[dict, np.ndarray]]:
    out, meta, rows = [], None, []
    for line in Path(path).read_text().splitlines() + [""]:
        if line.startswith("#"):
            meta = dict(kv.split("=", 1) for kv in line[1:].split())
            rows = []
        elif line.strip():
            rows.append([int(v) for v in line.split(",")])
        elif meta is not None:
            out.append((meta, np.array(rows, dtype=np.int64)))
            meta = None
    return out


def summary_rows(traces: Sequence[TraceRecord]) -> list[dict]:
    """One row per (model tag, block size)."""
    keyed: dict[tuple[str, int], list[TraceRecord]] = {}
    for t in traces:
        keyed.setdefault((t.model_tag, t.block_size), []).append(t)
    rows = []
    for (tag, B), group in sorted(keyed.items()):
        agg = aggregate_localstrict(group)
        rows.append({"model_tag": tag, "B": B, "mean_localstrict": agg["mean"],
                     "std_localstrict": agg["std"], "trace_count": agg["count"],
                     "mean_length": agg["mean_length"]})
    return rows
