import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdmlab.tasks import (
    VOCAB,
    DatasetSpec,
    Problem,
    SequenceLayout,
    extract_answer,
    generate_dataset,
    load_dataset,
    pass_at_k,
    save_dataset,
    split_of,
    verify,
)


def _prob(answer="42"):
    return Problem("p", "17+25=", f"####{answer}", answer, 2, "test")


@pytest.mark.parametrize("family", ["add", "mod_arith", "chain"])
def test_answers_are_correct_by_construction(family):
    probs = generate_dataset(DatasetSpec(family=family, count=200), seed=4)
    for p in probs:
        assert verify(p.solution, p) == 1
        if family == "add":
            a, b = p.prompt.rstrip("=").split("+")
            assert int(p.answer) == int(a) + int(b)
        if family == "mod_arith":
            a, rest = p.prompt.rstrip("=").split("*")
            b, m = rest.split("%")
            assert int(p.answer) == int(a) * int(b) % int(m)
        if family == "chain":
            assert int(p.answer) == eval(p.prompt.rstrip("="))


def test_two_digit_addition_shape():
    for p in generate_dataset(DatasetSpec(count=100), seed=0):
        a, b = p.prompt.rstrip("=").split("+")
        assert len(a) == len(b) == 2


def test_same_seed_same_dataset():
    spec = DatasetSpec(count=300, worked=True)
    assert generate_dataset(spec, 9) == generate_dataset(spec, 9)
    assert generate_dataset(spec, 9) != generate_dataset(spec, 10)


def test_split_sizes_and_disjointness():
    probs = generate_dataset(DatasetSpec(count=1000), seed=1)
    parts = {s: split_of(probs, s) for s in ("train", "validation", "test")}
    assert [len(parts[s]) for s in ("train", "validation", "test")] == [800, 100, 100]
    prompts = [{p.prompt for p in v} for v in parts.values()]
    assert all(not (a & b) for a, b in itertools.combinations(prompts, 2))


def test_fixed_width_answer():
    for p in generate_dataset(DatasetSpec(count=50, answer_width=3), seed=2):
        assert p.solution.endswith(p.answer.zfill(3)) or p.solution.endswith(p.answer)
        assert len(p.solution.split("####")[-1]) == 3


def test_difficulty_filter():
    probs = generate_dataset(DatasetSpec(count=50, difficulties=(2,)), seed=0)
    assert {p.difficulty for p in probs} == {2}


def test_dataset_roundtrip(tmp_path):
    probs = generate_dataset(DatasetSpec(count=20), seed=0)
    save_dataset(probs, tmp_path / "d.jsonl")
    assert load_dataset(tmp_path / "d.jsonl") == probs
    rec = json.loads((tmp_path / "d.jsonl").read_text().splitlines()[0])
    assert set(rec) == {"id", "prompt", "solution", "answer", "difficulty", "split"}


def test_corrupt_dataset_line_is_located(tmp_path):
    path = tmp_path / "d.jsonl"
    save_dataset(generate_dataset(DatasetSpec(count=3), seed=0), path)
    path.write_text(path.read_text() + "{oops\n")
    with pytest.raises(ValueError, match=":4:"):
        load_dataset(path)


@pytest.mark.parametrize("response,expected", [
    ("work answer: 42", 1), ("answer: 041", 1), ("####42", 1), ("no digits here", 0),
    ("answer: 43", 0), ("####41 ####42", 1), ("", 0),
])
def test_verify(response, expected):
    assert verify(response, _prob("41" if "41" in response and "42" not in response else "42")) == expected


def test_extract_normalizes():
    assert extract_answer("####007") == "7"
    assert extract_answer("####000") == "0"
    assert extract_answer("####-05") == "-5"
    assert extract_answer("17+25") is None


def _pass_at_k_enumerated(n, c, k):
    outcomes = [1] * c + [0] * (n - c)
    subsets = list(itertools.combinations(range(n), k))
    return sum(any(outcomes[i] for i in s) for s in subsets) / len(subsets)


def test_pass_at_k_values():
    assert pass_at_k([(3, 3)], 3) == 1.0
    assert pass_at_k([(3, 0)], 3) == 0.0
    assert pass_at_k([(4, 1)], 3) == pytest.approx(0.75, abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8).flatmap(lambda n: st.tuples(st.just(n), st.integers(0, n), st.integers(1, n))))
def test_pass_at_k_matches_subset_enumeration(nck):
    n, c, k = nck
    assert pass_at_k([(n, c)], k) == pytest.approx(_pass_at_k_enumerated(n, c, k), abs=1e-12)


def test_pass_at_k_validates():
    with pytest.raises(ValueError):
        pass_at_k([(2, 1)], 3)
    with pytest.raises(ValueError):
        pass_at_k([], 1)


def test_layout_encoding():
    lay = SequenceLayout(8, 8)
    p = Problem("x", "17+25=", "####042", "42", 2, "train")
    ids = lay.encode(p)
    assert len(ids) == 16
    assert ids[:2] == [VOCAB.PAD, VOCAB.BOS]
    assert VOCAB.decode(ids[8:]) == "####042"
    assert ids[-1] == VOCAB.EOS
    with pytest.raises(ValueError):
        SequenceLayout(4, 8).encode(p)


def test_vocab_roundtrip():
    s = "12+(3x4)%7=#,;? -"
    assert VOCAB.decode(VOCAB.encode(s)) == s
    with pytest.raises(ValueError):
        VOCAB.encode("Z")
