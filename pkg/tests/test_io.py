import numpy as np
import pytest

from mdmlab.io import append_jsonl, atomic_write_text, int_seed, read_jsonl, rng_for, write_jsonl


def test_jsonl_roundtrip(tmp_path):
    path = tmp_path / "x.jsonl"
    write_jsonl(path, [{"a": 1}, {"b": [1, 2]}])
    append_jsonl(path, {"c": None})
    assert read_jsonl(path) == [{"a": 1}, {"b": [1, 2]}, {"c": None}]


def test_corrupt_line_reported(tmp_path):
    path = tmp_path / "x.jsonl"
    path.write_text('{"a": 1}\n{"a": \n')
    with pytest.raises(ValueError, match=r"x\.jsonl:2"):
        read_jsonl(path)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_jsonl(tmp_path / "none.jsonl")


def test_atomic_write_leaves_no_temp_files(tmp_path):
    atomic_write_text(tmp_path / "sub" / "f.txt", "hello")
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["f.txt"]


def test_named_streams_are_independent_and_stable():
    a = rng_for(0, "rollout", 3, 1).random(4)
    assert np.array_equal(a, rng_for(0, "rollout", 3, 1).random(4))
    assert not np.array_equal(a, rng_for(0, "rollout", 3, 2).random(4))
    assert not np.array_equal(a, rng_for(0, "data", 3, 1).random(4))
    assert int_seed(1, "x") == int_seed(1, "x") != int_seed(2, "x")
