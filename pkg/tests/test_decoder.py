import numpy as np
import pytest
import torch

from mdmlab.decoder import (
    DecodeConfig,
    TraceRecord,
    confidence_scores,
    decode,
    decode_batch,
    read_traces,
    select_unmask,
    trace_of,
    write_traces,
)
from mdmlab.model import BlockPartition
from mdmlab.schedule import linearize, local_strict
from mdmlab.tasks import VOCAB


def _prompts(layout, n, seed=0):
    g = np.random.default_rng(seed)
    return [layout.encode_prompt(f"{a}+{b}=") for a, b in g.integers(10, 100, (n, 2))]


def test_confidence_one_hot_like():
    c = confidence_scores(torch.tensor([[10.0, 0, 0, 0]]), [0])
    oracle = 1.0 / (1.0 + 3.0 * np.exp(-10.0))
    assert c.item() == pytest.approx(oracle, abs=1e-15)
    assert round(c.item(), 5) == 0.99986


def test_confidence_uniform():
    assert confidence_scores(torch.zeros(1, 4), [0]).item() == pytest.approx(0.25, abs=1e-15)


def test_confidence_low_temperature_tends_to_one():
    lg = torch.randn(5, 7, generator=torch.Generator().manual_seed(0))
    c = confidence_scores(lg, range(5), temperature=1e-6)
    assert torch.all(c > 1 - 1e-12)


def test_confidence_excludes_mask_column():
    lg = torch.tensor([[0.0, 50.0, 0.0, 0.0]])
    assert confidence_scores(lg, [0], mask_id=1).item() == pytest.approx(1 / 3, abs=1e-12)


def test_select_threshold():
    assert select_unmask([0.9, 0.3, 0.95], [0, 1, 2], 0.8).tolist() == [0, 2]


def test_select_eta_zero_takes_all():
    assert select_unmask([0.1, 0.2, 0.05], [3, 4, 5], 0.0).tolist() == [3, 4, 5]


def test_select_fallback_argmax_with_tie_break():
    assert select_unmask([0.3, 0.6, 0.6], [4, 7, 5], 0.9).tolist() == [5]


def test_eta_zero_one_step_per_block(tiny_cfg, tiny_params, tiny_layout):
    cfg = DecodeConfig(eta=0.0, block_size=2)
    trajs = decode_batch(_prompts(tiny_layout, 6), tiny_params, tiny_cfg, tiny_layout, cfg)
    for tr in trajs:
        blocks = [st.block for st in tr.steps]
        assert len(blocks) == len(set(blocks))
        assert all(len(st.positions) == 2 for st in tr.steps)


@pytest.mark.parametrize("mode", ["greedy", "sample"])
def test_block_one_is_left_to_right(tiny_cfg, tiny_params, tiny_layout, mode):
    cfg = DecodeConfig(eta=0.9, block_size=1, mode=mode)
    for tr in decode_batch(_prompts(tiny_layout, 8), tiny_params, tiny_cfg, tiny_layout, cfg, seed=3):
        pos = [int(p) for st in tr.steps for p in st.positions]
        assert pos == sorted(pos)
        assert local_strict(linearize(trace_of(tr, 1, 0.9))) == 1.0


def test_trajectory_covers_response_once(tiny_cfg, tiny_params, tiny_layout):
    cfg = DecodeConfig(eta=0.5, block_size=4)
    for tr in decode_batch(_prompts(tiny_layout, 8), tiny_params, tiny_cfg, tiny_layout, cfg):
        pos = np.concatenate([st.positions for st in tr.steps])
        assert len(pos) == len(set(pos.tolist()))
        assert (tr.tokens[pos] != VOCAB.MASK).all()
        # every decoded block is contiguous from the start of the response
        assert pos.min() == tiny_layout.prompt_len


@pytest.mark.parametrize("mode", ["greedy", "sample"])
def test_repeatable_with_seed(tiny_cfg, tiny_params, tiny_layout, mode):
    cfg = DecodeConfig(eta=0.9, block_size=4, mode=mode)
    a = decode_batch(_prompts(tiny_layout, 5), tiny_params, tiny_cfg, tiny_layout, cfg, seed=11)
    b = decode_batch(_prompts(tiny_layout, 5), tiny_params, tiny_cfg, tiny_layout, cfg, seed=11)
    for x, y in zip(a, b):
        assert np.array_equal(x.tokens, y.tokens)
        assert [s.positions.tolist() for s in x.steps] == [s.positions.tolist() for s in y.steps]
        assert all(np.array_equal(s.logprobs, t.logprobs) for s, t in zip(x.steps, y.steps))


def test_sampling_independent_of_batching(tiny_cfg, tiny_params, tiny_layout):
    cfg = DecodeConfig(eta=0.9, block_size=2, mode="sample")
    prompts = _prompts(tiny_layout, 6)
    full = decode_batch(prompts, tiny_params, tiny_cfg, tiny_layout, cfg, seed=2)
    one = decode_batch(prompts[3:4], tiny_params, tiny_cfg, tiny_layout, cfg, seed=2, prompt_ids=[3])
    assert np.array_equal(full[3].tokens, one[0].tokens)


def test_sampled_tokens_record_their_logprob(tiny_cfg, tiny_params, tiny_layout):
    cfg = DecodeConfig(eta=0.9, block_size=4, mode="sample", temperature=1.3)
    for tr in decode_batch(_prompts(tiny_layout, 4), tiny_params, tiny_cfg, tiny_layout, cfg, seed=5):
        for st in tr.steps:
            assert np.allclose(st.old_logits[np.arange(len(st.tokens)), st.tokens], st.logprobs)
            assert (st.tokens != VOCAB.MASK).all()


def test_step_cap_forces_block(tiny_cfg, tiny_params, tiny_layout):
    cfg = DecodeConfig(eta=1.0, block_size=4, max_steps_per_block=2)
    for tr in decode_batch(_prompts(tiny_layout, 4), tiny_params, tiny_cfg, tiny_layout, cfg):
        per_block = {}
        for st in tr.steps:
            per_block.setdefault(st.block, []).append(st)
        for steps in per_block.values():
            assert len(steps) <= 2
        assert any(st.forced for st in tr.steps)


def test_max_blocks_truncates(tiny_cfg, tiny_params, tiny_layout):
    cfg = DecodeConfig(eta=0.9, block_size=2, max_blocks=1)
    (tr,) = decode_batch(_prompts(tiny_layout, 1), tiny_params, tiny_cfg, tiny_layout, cfg)
    assert {st.block for st in tr.steps} == {1}


def test_custom_partition_is_followed(tiny_cfg, tiny_params, tiny_layout):
    part = BlockPartition((0, 1, 3, 5, 7, 8), 2, "shifted")
    cfg = DecodeConfig(eta=0.0, block_size=2)
    (tr,) = decode_batch(_prompts(tiny_layout, 1), tiny_params, tiny_cfg, tiny_layout, cfg, part)
    P = tiny_layout.prompt_len
    assert [sorted((st.positions - P).tolist()) for st in tr.steps][:2] == [[0], [1, 2]]
    assert tr.partition.tag == "shifted"


def test_eos_block_stops_sequence(tiny_cfg, tiny_params, tiny_layout):
    cfg = DecodeConfig(eta=0.9, block_size=2)
    for tr in decode_batch(_prompts(tiny_layout, 16, 1), tiny_params, tiny_cfg, tiny_layout, cfg):
        blocks = sorted({st.block for st in tr.steps})
        last = blocks[-1]
        for b in blocks[:-1]:
            s = tiny_layout.prompt_len + 2 * (b - 1)
            assert VOCAB.EOS not in tr.tokens[s:s + 2].tolist()
        assert tr.truncated == (VOCAB.EOS not in tr.response_ids().tolist())
        assert last == len(blocks)


def test_decode_rejects_bad_prompt(tiny_cfg, tiny_params, tiny_layout):
    with pytest.raises(ValueError, match="length"):
        decode([3, 4], tiny_params, tiny_cfg, tiny_layout, DecodeConfig())


@pytest.mark.parametrize("kw", [{"eta": 1.5}, {"block_size": 0}, {"mode": "beam"}, {"temperature": 0.0}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        DecodeConfig(**kw)


def test_trace_roundtrip(tmp_path, tiny_cfg, tiny_params, tiny_layout):
    cfg = DecodeConfig(eta=0.7, block_size=4)
    trajs = decode_batch(_prompts(tiny_layout, 5), tiny_params, tiny_cfg, tiny_layout, cfg)
    traces = [trace_of(t, 4, 0.7, "m") for t in trajs]
    write_traces(tmp_path / "t.jsonl", traces[::-1])
    back = read_traces(tmp_path / "t.jsonl")
    assert back == sorted(traces, key=lambda r: (r.prompt_id, r.sample_id))


def test_trace_rejects_duplicate_positions():
    d = {"prompt_id": 0, "block_size": 2, "eta": 0.9, "events": [[0, 1, 5], [0, 2, 6]]}
    with pytest.raises(ValueError, match="duplicate"):
        TraceRecord.from_dict(d)
