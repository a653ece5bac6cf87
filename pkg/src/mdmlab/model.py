"""Tiny transformer with a block-causal attention pattern.

Attention is bidirectional inside a block and causal across blocks. The prompt
always forms block 0. Parameters live in a plain ``dict[str, Tensor]`` so that
snapshots, checkpoints and finite-difference probes stay trivial.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from . import numeric as nx
from .io import atomic_write_bytes

Params = dict[str, torch.Tensor]

CKPT_FORMAT = "mdmlab-ckpt-v1"


@dataclass
class ModelConfig:
    vocab_size: int = 27
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_len: int = 32
    mask_token_id: int = 1
    d_ff: int = 0              # 0 -> 4 * d_model
    value_head: bool = False
    init_seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0 <= self.mask_token_id < self.vocab_size:
            raise ValueError("mask_token_id must be < vocab_size")
        if self.d_ff == 0:
            self.d_ff = 4 * self.d_model


@dataclass(frozen=True)
class BlockPartition:
    """Contiguous blocks over ``[0, L)`` given by strictly increasing boundaries."""

    boundaries: tuple[int, ...]
    block_size: int = 1
    tag: str = "aligned"
    _index: np.ndarray = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        b = tuple(int(x) for x in self.boundaries)
        if len(b) < 2 or b[0] != 0 or any(x >= y for x, y in zip(b, b[1:])):
            raise ValueError(f"invalid block boundaries {b}")
        object.__setattr__(self, "boundaries", b)
        idx = np.repeat(np.arange(len(b) - 1), np.diff(b))
        object.__setattr__(self, "_index", idx)

    @property
    def length(self) -> int:
        return self.boundaries[-1]

    @property
    def n_blocks(self) -> int:
        return len(self.boundaries) - 1

    def blocks(self) -> list[tuple[int, int]]:
        return list(zip(self.boundaries, self.boundaries[1:]))

    def block_index(self) -> np.ndarray:
        return self._index

    def offset(self, start: int) -> "BlockPartition":
        """Shift this partition right by ``start`` and prepend ``[0, start)`` as one block."""
        head = (0,) if start > 0 else ()
        return BlockPartition(head + tuple(x + start for x in self.boundaries), self.block_size, self.tag)

    @classmethod
    def aligned(cls, length: int, block_size: int) -> "BlockPartition":
        if block_size < 1:
            raise ValueError("block size must be >= 1")
        bounds = list(range(0, length, block_size)) + [length]
        return cls(tuple(bounds), block_size, "aligned")

    def to_dict(self) -> dict:
        return {"boundaries": list(self.boundaries), "block_size": self.block_size, "tag": self.tag}

    @classmethod
    def from_dict(cls, d: Mapping) -> "BlockPartition":
        return cls(tuple(d["boundaries"]), int(d["block_size"]), d.get("tag", "aligned"))


def sequence_partition(prompt_len: int, response: BlockPartition) -> BlockPartition:
    """Full-sequence partition: the prompt as block 0, then the response blocks."""
    return response.offset(prompt_len)


def attention_mask(partition: BlockPartition, length: int) -> torch.Tensor:
    """Boolean ``[L, L]``; entry (i, j) true iff block(j) <= block(i)."""
    if partition.length != length:
        raise ValueError(f"partition covers [0, {partition.length}) but sequence length is {length}")
    blk = torch.as_tensor(partition.block_index())
    return blk[None, :] <= blk[:, None]


def train_attention_mask(partition: BlockPartition, prompt_len: int) -> torch.Tensor:
    """Mask for the ``[noisy sequence ; clean response copy]`` training layout.

    A noisy response position sees the prompt, its own (noisy) block and the
    clean copy of earlier blocks; clean copies see the prompt and clean blocks up
    to their own. This reproduces exactly what a query sees during decoding.
    """
    L = partition.length
    R = L - prompt_len
    blk = torch.as_tensor(partition.block_index())
    rblk = blk[prompt_len:]
    is_prompt = torch.arange(L) < prompt_len
    m = torch.zeros(L + R, L + R, dtype=torch.bool)
    m[:L, :L] = (blk[None, :] == blk[:, None]) | is_prompt[None, :]
    m[:L, L:] = rblk[None, :] < blk[:, None]
    m[L:, :L] = is_prompt[None, :].expand(R, L)
    m[L:, L:] = rblk[None, :] <= rblk[:, None]
    return m


def init_params(cfg: ModelConfig, seed: int | None = None) -> Params:
    g = torch.Generator().manual_seed(cfg.init_seed if seed is None else seed)
    d, V, F = cfg.d_model, cfg.vocab_size, cfg.d_ff

    def normal(*shape):
        return torch.randn(*shape, generator=g) * 0.02

    p: Params = {"tok_emb": normal(V, d), "pos_emb": normal(cfg.max_len, d)}
    for i in range(cfg.n_layers):
        pre = f"layer{i}."
        p[pre + "ln1.g"] = torch.ones(d)
        p[pre + "ln1.b"] = torch.zeros(d)
        for w in ("wq", "wk", "wv", "wo"):
            p[pre + f"attn.{w}"] = normal(d, d)
            p[pre + f"attn.b{w[1]}"] = torch.zeros(d)
        p[pre + "ln2.g"] = torch.ones(d)
        p[pre + "ln2.b"] = torch.zeros(d)
        p[pre + "mlp.w1"] = normal(d, F)
        p[pre + "mlp.b1"] = torch.zeros(F)
        p[pre + "mlp.w2"] = normal(F, d)
        p[pre + "mlp.b2"] = torch.zeros(d)
    p["ln_f.g"] = torch.ones(d)
    p["ln_f.b"] = torch.zeros(d)
    p["head.w"] = normal(d, V)
    p["head.b"] = torch.zeros(V)
    if cfg.value_head:
        p["value.w"] = torch.zeros(d)
        p["value.b"] = torch.zeros(1)
    return p


def _split_heads(x: torch.Tensor, n_heads: int) -> torch.Tensor:
    N, S, d = x.shape
    return x.reshape(N, S, n_heads, d // n_heads).transpose(1, 2)


def _trunk(params: Mapping[str, torch.Tensor], cfg: ModelConfig, ids: torch.Tensor,
           pos: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
    h = nx.add(nx.embedding(ids, params["tok_emb"]), nx.embedding(pos, params["pos_emb"]))
    N, S, d = h.shape
    for i in range(cfg.n_layers):
        pre = f"layer{i}."
        x = nx.layer_norm(h, params[pre + "ln1.g"], params[pre + "ln1.b"])
        q, k, v = (
            _split_heads(nx.add(nx.matmul(x, params[pre + f"attn.w{c}"]), params[pre + f"attn.b{c}"]),
                         cfg.n_heads)
            for c in "qkv"
        )
        att = nx.softmax(nx.attention_scores(q, k, allowed))
        o = nx.matmul(att, v).transpose(1, 2).reshape(N, S, d)
        h = nx.add(h, nx.add(nx.matmul(o, params[pre + "attn.wo"]), params[pre + "attn.bo"]))
        x = nx.layer_norm(h, params[pre + "ln2.g"], params[pre + "ln2.b"])
        x = nx.gelu(nx.add(nx.matmul(x, params[pre + "mlp.w1"]), params[pre + "mlp.b1"]))
        h = nx.add(h, nx.add(nx.matmul(x, params[pre + "mlp.w2"]), params[pre + "mlp.b2"]))
    return nx.layer_norm(h, params["ln_f.g"], params["ln_f.b"])


def _head(params, h):
    return nx.add(nx.matmul(h, params["head.w"]), params["head.b"])


def _check_tokens(tokens: torch.Tensor, cfg: ModelConfig) -> torch.Tensor:
    tokens = torch.as_tensor(tokens, dtype=torch.long)
    if tokens.dim() == 1:
        tokens = tokens[None]
    if tokens.shape[-1] > cfg.max_len:
        raise ValueError(f"sequence length {tokens.shape[-1]} exceeds max_len={cfg.max_len}")
    if tokens.numel() and (int(tokens.max()) >= cfg.vocab_size or int(tokens.min()) < 0):
        raise ValueError(f"token id outside [0, {cfg.vocab_size})")
    return tokens


def forward(tokens, partition: BlockPartition, params: Mapping[str, torch.Tensor],
            cfg: ModelConfig, return_hidden: bool = False):
    """Logits ``[N, L, V]`` (a 1-D input gives ``N = 1``)."""
    tokens = _check_tokens(tokens, cfg)
    L = tokens.shape[-1]
    allowed = attention_mask(partition, L)
    h = _trunk(params, cfg, tokens, torch.arange(L), allowed)
    logits = _head(params, h)
    return (logits, h) if return_hidden else logits


def forward_train(x_t, x0, partition: BlockPartition, prompt_len: int,
                  params: Mapping[str, torch.Tensor], cfg: ModelConfig) -> torch.Tensor:
    """Logits ``[N, L, V]`` for the noisy sequence with clean context for earlier blocks.

    One pass gives, for every block at once, the logits decoding would see when
    all earlier blocks are finalized and the current block equals ``x_t``.
    """
    x_t = _check_tokens(x_t, cfg)
    x0 = _check_tokens(x0, cfg)
    if x_t.shape != x0.shape:
        raise nx.ShapeError("forward_train", x_t.shape, x0.shape)
    L = x_t.shape[-1]
    if partition.length != L:
        raise ValueError(f"partition covers [0, {partition.length}) but sequence length is {L}")
    ids = torch.cat([x_t, x0[:, prompt_len:]], dim=1)
    pos = torch.cat([torch.arange(L), torch.arange(prompt_len, L)])
    h = _trunk(params, cfg, ids, pos, train_attention_mask(partition, prompt_len))
    return _head(params, h[:, :L])


# ----------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, cfg: ModelConfig, params: Mapping[str, torch.Tensor],
                    step: int = 0, seed: int = 0, optimizer_state: dict | None = None,
                    extra: dict | None = None) -> None:
    """Write an ``.npz`` archive: a ``meta`` JSON blob, ``param/<name>`` float64
    arrays and optional ``opt/<param>/<key>`` AdamW moments.
    """
    arrays: dict[str, np.ndarray] = {}
    for name in sorted(params):
        arrays[f"param/{name}"] = params[name].detach().cpu().numpy().astype(np.float64)
    opt_meta = None
    if optimizer_state is not None:
        opt_meta = {"param_groups": optimizer_state["param_groups"], "steps": {}}
        for idx, st in optimizer_state["state"].items():
            for key, val in st.items():
                if key == "step":
                    opt_meta["steps"][str(idx)] = float(val)
                else:
                    arrays[f"opt/{idx}/{key}"] = val.detach().cpu().numpy()
    meta = {
        "format": CKPT_FORMAT,
        "config": asdict(cfg),
        "step": int(step),
        "seed": int(seed),
        "param_names": sorted(params),
        "optimizer": opt_meta,
        "extra": extra or {},
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write_bytes(path, buf.getvalue())


@dataclass
class Checkpoint:
    config: ModelConfig
    params: Params
    step: int
    seed: int
    optimizer_state: dict | None
    extra: dict


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with np.load(path) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            if meta.get("format") != CKPT_FORMAT:
                raise ValueError(f"{path}: unknown checkpoint format {meta.get('format')!r}")
            params = {n: torch.from_numpy(z[f"param/{n}"].copy()) for n in meta["param_names"]}
            opt = None
            if meta["optimizer"] is not None:
                state: dict = {}
                for key in z.files:
                    if key.startswith("opt/"):
                        _, idx, k = key.split("/", 2)
                        state.setdefault(int(idx), {})[k] = torch.from_numpy(z[key].copy())
                for idx, s in meta["optimizer"]["steps"].items():
                    state.setdefault(int(idx), {})["step"] = torch.tensor(s)
                opt = {"state": state, "param_groups": meta["optimizer"]["param_groups"]}
    except (OSError, KeyError, json.JSONDecodeError, ValueError) as e:
        raise ValueError(f"corrupt checkpoint {path}: {e}") from None
    return Checkpoint(ModelConfig(**meta["config"]), params, meta["step"], meta["seed"], opt, meta["extra"])


def clone_params(params: Mapping[str, torch.Tensor], requires_grad: bool = False) -> Params:
    return {k: v.detach().clone().requires_grad_(requires_grad) for k, v in params.items()}


def param_names_sorted(params: Mapping[str, torch.Tensor]) -> Sequence[str]:
    return sorted(params)
