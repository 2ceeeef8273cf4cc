import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mmpath.encode import EncoderStack, NodeClassifier, apply_mask, encode, mask_count, mnm_loss, plan_mask
from mmpath.errors import ConfigError
from mmpath.tokenize import CLS, MASK, NODE, SEP, RoadTokenSeq, Token

from fd import check


def _road_seq(n_nodes, per_tile=5):
    toks = [Token(CLS)]
    for i in range(n_nodes):
        toks.append(Token(NODE, node=100 + i))
        if (i + 1) % per_tile == 0 or i == n_nodes - 1:
            toks.append(Token(SEP))
    return RoadTokenSeq(0, tuple(toks), sum(t.kind == SEP for t in toks))


def test_empty_stack_is_identity():
    x = torch.randn(7, 16)
    assert torch.equal(encode(EncoderStack(16, 0, 4), x), x)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 12), st.sampled_from([4, 8, 12]), st.integers(0, 2))
def test_output_shape(n, d, layers):
    stack = EncoderStack(d, layers, 4, dropout=0.0)
    assert encode(stack, torch.randn(n, d)).shape == (n, d)
    assert encode(stack, torch.randn(3, n, d)).shape == (3, n, d)


def test_shape_mismatch():
    stack = EncoderStack(8, 1, 2)
    with pytest.raises(ValueError):
        stack(torch.randn(4, 6))
    with pytest.raises(ValueError):
        stack(torch.randn(2, 4, 8), torch.zeros(2, 5, dtype=torch.bool))
    with pytest.raises(ConfigError):
        EncoderStack(10, 1, 4)


@pytest.mark.parametrize("layers", [1, 3])
def test_padding_invariance(layers):
    torch.manual_seed(0)
    stack = EncoderStack(16, layers, 4, dropout=0.0).eval()
    x = torch.randn(2, 9, 16)
    pad = torch.zeros(2, 9, dtype=torch.bool)
    pad[0, 6:] = True
    pad[1, 3:] = True
    y = encode(stack, x, pad)
    x2 = x.clone()
    x2[pad] = torch.randn(int(pad.sum()), 16) * 1e3
    y2 = encode(stack, x2, pad)
    assert torch.equal(y[~pad], y2[~pad])
    # a padded batch row equals the unpadded single sequence up to float reassociation
    torch.testing.assert_close(y[1, :3], encode(stack, x[1, :3]), rtol=1e-5, atol=1e-6)


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 10), st.randoms(use_true_random=False))
def test_permutation_equivariance(n, rnd):
    torch.manual_seed(n)
    stack = EncoderStack(8, 1, 2, dropout=0.0).double()
    x = torch.randn(n, 8, dtype=torch.float64)
    perm = list(range(n))
    rnd.shuffle(perm)
    perm = torch.tensor(perm)
    torch.testing.assert_close(encode(stack, x[perm]), encode(stack, x)[perm])


def test_mask_count_examples():
    assert mask_count(100, 0.15) == 15
    assert mask_count(3, 0.15) == 1
    assert mask_count(10, 0.25) == 3  # 2.5 rounds half up
    assert mask_count(5, 0.0) == 0


def test_plan_mask_hundred_nodes():
    seq = _road_seq(100)
    plan = plan_mask(seq, 0.15, np.random.default_rng(0))
    assert len(plan.positions) == 15 == len(set(plan.positions))
    assert plan.originals == tuple(seq.tokens[p].node for p in plan.positions)


def test_plan_mask_ratio_zero():
    assert plan_mask(_road_seq(10), 0.0, np.random.default_rng(0)).positions == ()


def test_plan_mask_never_special():
    seq = _road_seq(23)
    rng = np.random.default_rng(1)
    for _ in range(1000):
        plan = plan_mask(seq, 0.3, rng)
        assert all(seq.tokens[p].kind == NODE for p in plan.positions)


def test_plan_mask_bad_ratio():
    with pytest.raises(ConfigError):
        plan_mask(_road_seq(5), 1.0, np.random.default_rng(0))


def test_apply_mask():
    seq = _road_seq(6)
    plan = plan_mask(seq, 0.5, np.random.default_rng(2))
    masked = apply_mask(seq, plan)
    assert [i for i, t in enumerate(masked.tokens) if t.kind == MASK] == list(plan.positions)


def test_mnm_uniform_logits():
    clf = NodeClassifier(8, 17)
    with torch.no_grad():
        clf.weight.zero_()
        clf.bias.zero_()
    seq = _road_seq(4)
    plan = plan_mask(seq, 0.1, np.random.default_rng(0))
    vocab = {100 + i: i for i in range(17)}
    loss = mnm_loss(torch.randn(len(seq), 8), plan, clf, vocab)
    assert math.isclose(loss.item(), math.log(17), rel_tol=1e-6)


def test_mnm_confident_logits():
    clf = NodeClassifier(2, 3)
    seq = _road_seq(1)
    plan = plan_mask(seq, 0.5, np.random.default_rng(0))
    P = torch.zeros(len(seq), 2)
    P[plan.positions[0]] = torch.tensor([1.0, 0.0])
    with torch.no_grad():
        clf.weight.copy_(torch.tensor([[1e4, 0.0], [0.0, 0.0], [0.0, 0.0]]))
        clf.bias.zero_()
    assert mnm_loss(P, plan, clf, {100: 0}).item() < 1e-12


def test_mnm_gradients_match_finite_differences():
    torch.manual_seed(3)
    clf = NodeClassifier(8, 11).double()
    seq = _road_seq(12)
    plan = plan_mask(seq, 0.3, np.random.default_rng(0))
    vocab = {100 + i: i % 11 for i in range(12)}
    P = torch.randn(len(seq), 8, dtype=torch.float64)
    assert check(lambda: mnm_loss(P, plan, clf, vocab), [clf.weight, clf.bias]) <= 1e-4


def test_mnm_decreases_on_one_path():
    torch.manual_seed(0)
    stack = EncoderStack(16, 1, 4, dropout=0.0)
    clf = NodeClassifier(16, 8)
    seq = _road_seq(8)
    plan = plan_mask(seq, 0.3, np.random.default_rng(0))
    vocab = {100 + i: i for i in range(8)}
    x = torch.randn(len(seq), 16)
    opt = torch.optim.SGD(list(stack.parameters()) + list(clf.parameters()), lr=0.05)
    losses = []
    for _ in range(30):
        loss = mnm_loss(encode(stack, x), plan, clf, vocab)
        assert loss.item() >= 0
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    assert all(b < a for a, b in zip(losses, losses[1:]))
