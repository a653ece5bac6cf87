import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mdmlab.model import (
    BlockPartition,
    ModelConfig,
    attention_mask,
    forward,
    forward_train,
    init_params,
    load_checkpoint,
    save_checkpoint,
    sequence_partition,
)
from mdmlab.tasks import VOCAB


def test_single_block_mask_is_dense():
    assert attention_mask(BlockPartition((0, 5)), 5).all()


def test_unit_blocks_give_causal_mask():
    m = attention_mask(BlockPartition.aligned(6, 1), 6)
    assert torch.equal(m, torch.tril(torch.ones(6, 6, dtype=torch.bool)))


def test_two_blocks_of_two():
    m = attention_mask(BlockPartition((0, 2, 4)), 4)
    assert m[:2, :2].all() and not m[:2, 2:].any()
    assert m[2:].all()


def test_mask_length_mismatch():
    with pytest.raises(ValueError):
        attention_mask(BlockPartition((0, 2, 4)), 5)


@pytest.mark.parametrize("bounds", [(0,), (1, 3), (0, 2, 2), (0, 3, 2)])
def test_invalid_partitions(bounds):
    with pytest.raises(ValueError):
        BlockPartition(bounds)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 24), st.integers(1, 9))
def test_aligned_partition_covers_sequence(L, B):
    p = BlockPartition.aligned(L, B)
    sizes = np.diff(p.boundaries)
    assert sizes.sum() == L
    assert (sizes[:-1] == B).all() and 1 <= sizes[-1] <= B


def test_partition_roundtrip():
    p = sequence_partition(4, BlockPartition((0, 1, 3, 6), 2, "shifted"))
    assert p.boundaries == (0, 4, 5, 7, 10)
    assert BlockPartition.from_dict(p.to_dict()) == p


def test_all_mask_single_block_is_finite(tiny_cfg, tiny_params):
    toks = torch.full((1, 10), VOCAB.MASK)
    out = forward(toks, BlockPartition((0, 10)), tiny_params, tiny_cfg)
    assert out.shape == (1, 10, tiny_cfg.vocab_size)
    assert torch.isfinite(out).all()


def test_later_block_edit_leaves_earlier_logits_identical(tiny_cfg, tiny_params):
    part = BlockPartition((0, 4, 6, 8, 10))
    a = torch.tensor([[3, 5, 6, 7, 1, 1, 8, 9, 1, 10]])
    b = a.clone()
    b[0, 8] = 12
    la, lb = forward(a, part, tiny_params, tiny_cfg), forward(b, part, tiny_params, tiny_cfg)
    assert torch.equal(la[:, :8], lb[:, :8])
    assert not torch.equal(la[:, 8:], lb[:, 8:])


def test_within_block_edit_changes_block_neighbours(tiny_cfg, tiny_params):
    part = BlockPartition((0, 4, 8, 10))
    a = torch.tensor([[3, 5, 6, 7, 1, 1, 1, 1, 1, 1]])
    b = a.clone()
    b[0, 5] = 9
    la, lb = forward(a, part, tiny_params, tiny_cfg), forward(b, part, tiny_params, tiny_cfg)
    for j in (4, 6, 7):
        assert not torch.allclose(la[0, j], lb[0, j])


def test_rejects_bad_tokens(tiny_cfg, tiny_params):
    with pytest.raises(ValueError, match="token id"):
        forward(torch.tensor([[0, 99]]), BlockPartition((0, 2)), tiny_params, tiny_cfg)
    with pytest.raises(ValueError, match="max_len"):
        forward(torch.zeros(1, 40, dtype=torch.long), BlockPartition((0, 40)), tiny_params, tiny_cfg)


def test_config_checks_heads():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=4)


@pytest.mark.parametrize("resp_bounds", [(0, 2, 4, 6, 8), (0, 1, 3, 5, 7, 8), (0, 4, 8)])
def test_train_forward_matches_decode_context(tiny_cfg, tiny_params, resp_bounds):
    """Block k of the two-stream pass equals a plain pass with clean blocks < k,
    the noisy block k and masked blocks > k."""
    P, R = 6, 8
    g = np.random.default_rng(0)
    x0 = np.concatenate([[0, 3], g.integers(4, 27, P - 2), g.integers(2, 27, R)])
    xt = x0.copy()
    xt[P + g.permutation(R)[:5]] = VOCAB.MASK
    part = sequence_partition(P, BlockPartition(resp_bounds))
    train_logits = forward_train(torch.tensor(xt[None]), torch.tensor(x0[None]), part, P, tiny_params, tiny_cfg)
    for s, e in part.blocks()[1:]:
        state = x0.copy()
        state[s:e] = xt[s:e]
        state[e:] = VOCAB.MASK
        ref = forward(torch.tensor(state[None]), part, tiny_params, tiny_cfg)
        assert torch.allclose(train_logits[0, s:e], ref[0, s:e], atol=1e-12)


def test_init_is_seeded(tiny_cfg):
    a, b, c = init_params(tiny_cfg, 1), init_params(tiny_cfg, 1), init_params(tiny_cfg, 2)
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not torch.equal(a["tok_emb"], c["tok_emb"])


def test_checkpoint_roundtrip(tmp_path, tiny_cfg, tiny_params):
    opt = torch.optim.AdamW([tiny_params[k].requires_grad_(True) for k in sorted(tiny_params)], lr=1e-3)
    loss = sum((v ** 2).sum() for v in tiny_params.values())
    loss.backward()
    opt.step()
    path = tmp_path / "ck.npz"
    save_checkpoint(path, tiny_cfg, tiny_params, step=7, seed=3, optimizer_state=opt.state_dict(),
                    extra={"note": "x"})
    ck = load_checkpoint(path)
    assert ck.step == 7 and ck.seed == 3 and ck.extra == {"note": "x"}
    assert ck.config == tiny_cfg
    assert all(torch.equal(ck.params[k], tiny_params[k].detach()) for k in tiny_params)
    opt2 = torch.optim.AdamW([ck.params[k].requires_grad_(True) for k in sorted(ck.params)], lr=1e-3)
    opt2.load_state_dict(ck.optimizer_state)
    s1, s2 = opt.state_dict()["state"], opt2.state_dict()["state"]
    assert all(torch.equal(s1[i]["exp_avg"], s2[i]["exp_avg"]) for i in s1)


def test_checkpoint_rejects_foreign_file(tmp_path):
    bad = tmp_path / "bad.npz"
    np.savez(bad, x=np.zeros(2))
    with pytest.raises(ValueError):
        load_checkpoint(bad)
