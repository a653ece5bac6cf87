"""Synthetic verifiable arithmetic tasks, char-level vocab, reward and pass@k."""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from math import comb
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

ANSWER_MARKER = "####"
SPLITS = ("train", "validation", "test")


class Vocab:
    """Character vocabulary with specials PAD, MASK, EOS, BOS at ids 0..3."""

    PAD, MASK, EOS, BOS = 0, 1, 2, 3
    SPECIALS = ("<pad>", "<mask>", "<eos>", "<bos>")
    CHARS = "0123456789+-*%=#,;()x? "

    def __init__(self):
        self.symbols = list(self.SPECIALS) + list(self.CHARS)
        self._index = {c: i for i, c in enumerate(self.CHARS, start=len(self.SPECIALS))}

    def __len__(self) -> int:
        return len(self.symbols)

    def encode(self, text: str) -> list[int]:
        try:
            return [self._index[c] for c in text]
        except KeyError as e:
            raise ValueError(f"character {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Iterable[int], stop_at_eos: bool = True) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == self.EOS and stop_at_eos:
                break
            if i < len(self.SPECIALS):
                continue
            out.append(self.symbols[i])
        return "".join(out)

    def ids_to_symbols(self, ids: Iterable[int]) -> list[str]:
        return [self.symbols[int(i)] for i in ids]


VOCAB = Vocab()


@dataclass
class Problem:
    id: str
    prompt: str
    solution: str
    answer: str
    difficulty: int
    split: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class DatasetSpec:
    family: str = "add"            # add | mod_arith | chain
    digits: tuple[int, int] = (2, 2)
    count: int = 1000
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    worked: bool = False           # include intermediate steps before the marker
    answer_width: int = 0          # zero-pad answers to this width (0: no padding)
    difficulties: tuple[int, ...] = field(default_factory=tuple)  # empty: keep all


def _operand(rng: np.random.Generator, lo_digits: int, hi_digits: int) -> int:
    nd = int(rng.integers(lo_digits, hi_digits + 1))
    lo = 10 ** (nd - 1) if nd > 1 else 0
    return int(rng.integers(lo, 10 ** nd))


def _fmt_answer(value: int, width: int) -> str:
    s = str(abs(value)).zfill(width) if width else str(abs(value))
    return ("-" if value < 0 else "") + s


def _make_add(rng, spec: DatasetSpec):
    a = _operand(rng, *spec.digits)
    b = _operand(rng, *spec.digits)
    prompt = f"{a}+{b}="
    total = a + b
    steps, carries = [], 0
    carry, da, db = 0, str(a)[::-1], str(b)[::-1]
    # column sums right to left, carry folded in
    for i in range(max(len(da), len(db))):
        s = carry + (int(da[i]) if i < len(da) else 0) + (int(db[i]) if i < len(db) else 0)
        steps.append(str(s))
        carry = s // 10
        carries += carry
    if not spec.worked:
        steps = []
    difficulty = max(len(da), len(db)) + carries
    return prompt, steps, total, difficulty


def _make_mod(rng, spec: DatasetSpec):
    a = _operand(rng, *spec.digits)
    b = _operand(rng, 1, 1) + 1
    m = int(rng.integers(3, 10))
    prompt = f"{a}*{b}%{m}="
    prod = a * b
    steps = [str(prod)] if spec.worked else []
    return prompt, steps, prod % m, 2 + (prod >= 100)


def _make_chain(rng, spec: DatasetSpec):
    n_ops = int(rng.integers(2, 4))
    x = _operand(rng, *spec.digits)
    expr, steps = str(x), []
    for _ in range(n_ops):
        op = "+-*"[int(rng.integers(0, 3))]
        y = int(rng.integers(2, 10)) if op == "*" else _operand(rng, 1, 1)
        x = x + y if op == "+" else x - y if op == "-" else x * y
        # parenthesize so ordinary precedence agrees with left-to-right evaluation
        if op == "*" and any(c in expr for c in "+-"):
            expr = f"({expr})"
        expr += f"{op}{y}"
        steps.append(str(x))
    if not spec.worked:
        steps = []
    return expr + "=", steps, x, 1 + n_ops


_FAMILIES = {"add": _make_add, "mod_arith": _make_mod, "chain": _make_chain}


def generate_dataset(spec: DatasetSpec, seed: int) -> list[Problem]:
    """Deterministic list of unique problems assigned to train/validation/test.

    Prompts are unique across the whole dataset, so the splits never share a
    prompt.
    """
    if spec.count < 1:
        raise ValueError("count must be >= 1")
    lo, hi = spec.digits
    if lo < 1 or hi < lo:
        raise ValueError(f"empty digit range {spec.digits}")
    if spec.family not in _FAMILIES:
        raise ValueError(f"unknown family {spec.family!r}")
    make = _FAMILIES[spec.family]
    rng = np.random.default_rng(seed)
    seen: set[str] = set()
    rows = []
    attempts = 0
    while len(rows) < spec.count:
        attempts += 1
        if attempts > 50 * spec.count + 1000:
            raise ValueError(f"cannot draw {spec.count} unique {spec.family} problems")
        prompt, steps, value, difficulty = make(rng, spec)
        if prompt in seen or (spec.difficulties and difficulty not in spec.difficulties):
            continue
        seen.add(prompt)
        answer = str(value)
        body = ",".join(steps)
        solution = f"{body}{ANSWER_MARKER}{_fmt_answer(value, spec.answer_width)}"
        rows.append((prompt, solution, answer, difficulty))

    n = len(rows)
    n_train = int(round(spec.split_fractions[0] * n))
    n_val = int(round(spec.split_fractions[1] * n))
    order = rng.permutation(n)
    assigned = np.empty(n, dtype=object)
    assigned[order[:n_train]] = "train"
    assigned[order[n_train:n_train + n_val]] = "validation"
    assigned[order[n_train + n_val:]] = "test"
    return [
        Problem(f"{spec.family}-{i:06d}", p, s, a, d, str(assigned[i]))
        for i, (p, s, a, d) in enumerate(rows)
    ]


def split_of(problems: Sequence[Problem], split: str) -> list[Problem]:
    return [p for p in problems if p.split == split]


def save_dataset(problems: Sequence[Problem], path: str | Path) -> None:
    from .io import atomic_write_text
    atomic_write_text(path, "".join(p.to_json() + "\n" for p in problems))


def load_dataset(path: str | Path) -> list[Problem]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(Problem(**json.loads(line)))
        except (json.JSONDecodeError, TypeError) as e:
            raise ValueError(f"{path}:{lineno}: corrupt dataset record ({e})") from None
    return out


_INT_RE = re.compile(r"-?\d+")


def _normalize_int(s: str) -> str:
    neg = s.startswith("-")
    digits = s.lstrip("-").lstrip("0") or "0"
    return "-" + digits if neg and digits != "0" else digits


def extract_answer(response: str) -> str | None:
    """Last integer after the last answer marker, normalized; None if absent."""
    cut = max(response.rfind(ANSWER_MARKER), response.lower().rfind("answer:"))
    if cut < 0:
        return None
    found = _INT_RE.findall(response[cut:].replace(ANSWER_MARKER, " "))
    return _normalize_int(found[-1]) if found else None


def verify(response: str, problem: Problem) -> int:
    got = extract_answer(response)
    return int(got is not None and got == _normalize_int(problem.answer))


def pass_at_k(samples: Sequence[tuple[int, int]], k: int) -> float:
    """Unbiased pass@k averaged over problems given ``(n, c)`` per problem."""
    if not samples:
        raise ValueError("no problems")
    total = 0.0
    for n, c in samples:
        if not 1 <= k <= n:
            raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
        if not 0 <= c <= n:
            raise ValueError(f"correct count {c} outside [0, {n}]")
        total += 1.0 - comb(n - c, k) / comb(n, k)
    return total / len(samples)


@dataclass(frozen=True)
class SequenceLayout:
    """Fixed-width token layout: left-padded ``[PAD.. BOS prompt]`` then the response.

    Responses end in EOS and are padded with EOS up to ``response_len``.
    """

    prompt_len: int = 12
    response_len: int = 8

    @property
    def length(self) -> int:
        return self.prompt_len + self.response_len

    def encode_prompt(self, prompt: str) -> list[int]:
        ids = [VOCAB.BOS] + VOCAB.encode(prompt)
        if len(ids) > self.prompt_len:
            raise ValueError(f"prompt {prompt!r} longer than prompt_len={self.prompt_len}")
        return [VOCAB.PAD] * (self.prompt_len - len(ids)) + ids

    def encode_response(self, solution: str) -> list[int]:
        ids = VOCAB.encode(solution) + [VOCAB.EOS]
        if len(ids) > self.response_len:
            raise ValueError(f"solution {solution!r} longer than response_len={self.response_len}")
        return ids + [VOCAB.EOS] * (self.response_len - len(ids))

    def encode(self, problem: Problem) -> list[int]:
        return self.encode_prompt(problem.prompt) + self.encode_response(problem.solution)
