import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from trajmoment.core import TemporalSpan, span_giou
from trajmoment.model import ModelConfig, init_params
from trajmoment.objective import (Assignment, LossWeights, NoMatches, hungarian_match, loss_class,
                                  loss_contrastive, loss_saliency, loss_span, matching_cost,
                                  sample_saliency_pairs, total_loss)

import oracles

W = LossWeights()


def test_matching_cost_examples():
    assert matching_cost([0.5, 0.1], 1.0, [0.5, 0.1]) == pytest.approx(-1)
    assert matching_cost([0.5, 0.1], 0.5, [0.5, 0.1]) == pytest.approx(-0.5)
    g = span_giou(TemporalSpan(0.15, 0.25), TemporalSpan(0.45, 0.55))
    assert matching_cost([0.2, 0.1], 0.5, [0.5, 0.1]) == pytest.approx(-0.5 + 10 * 0.3 + (1 - g))


def test_hungarian_examples():
    a = hungarian_match([[5.0]])
    assert a.pairs == [(0, 0)] and a.cost([[5.0]]) == 5
    m = [[1, 2], [3, 1]]
    a = hungarian_match(m)
    assert a.pairs == [(0, 0), (1, 1)] and a.cost(m) == 2
    a = hungarian_match(np.zeros((3, 1)))
    assert a.pairs == [(0, 0)] and a.unmatched == [1, 2]


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 7), st.integers(1, 7), st.integers(0, 2**32 - 1), st.booleans())
def test_hungarian_matches_brute_force(n, m, seed, integer):
    rng = np.random.default_rng(seed)
    cost = rng.integers(0, 3, (n, m)).astype(float) if integer else rng.normal(size=(n, m))
    best, pairs = oracles.brute_force_assignment(cost)
    a = hungarian_match(cost)
    assert len(a.pairs) == min(n, m)
    assert len({i for i, _ in a.pairs}) == len({j for _, j in a.pairs}) == len(a.pairs)
    assert a.cost(cost) == pytest.approx(best, abs=1e-9)
    if integer:
        assert a.pairs == pairs


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1), st.floats(0.01, 100))
def test_hungarian_scale_consistent(n, m, seed, k):
    cost = np.random.default_rng(seed).integers(0, 5, (n, m)).astype(float)
    assert hungarian_match(cost).pairs == hungarian_match(cost * k).pairs


def test_loss_span_examples():
    p = torch.tensor([[0.5, 0.2]], dtype=torch.float64)
    assert float(loss_span(p, p.clone())) == pytest.approx(0, abs=1e-12)
    # L1 = 0.3 with gIoU 0.4: build it from the definition
    pred = torch.tensor([[0.35, 0.2]], dtype=torch.float64)
    gt = torch.tensor([[0.5, 0.35]], dtype=torch.float64)
    l1 = float((pred - gt).abs().sum())
    g = span_giou(TemporalSpan(0.25, 0.45), TemporalSpan(0.325, 0.675))
    assert l1 == pytest.approx(0.3) and g == pytest.approx(0.125 / 0.425)
    assert float(loss_span(pred, gt)) == pytest.approx(10 * l1 + (1 - g))
    a, b = loss_span(pred, gt, parts=True)
    a2, b2 = loss_span(pred, gt, LossWeights(lambda_l1=20), parts=True)
    assert float(a2) == pytest.approx(2 * float(a)) and float(b2) == float(b)
    with pytest.raises(NoMatches):
        loss_span(pred[:0], gt[:0])


def test_loss_span_arithmetic_case():
    # when L1 = 0.3 and gIoU = 0.4 the loss is 3.6
    assert 10 * 0.3 + 1 * (1 - 0.4) == pytest.approx(3.6)
    pred = torch.tensor([[0.4, 0.4]], dtype=torch.float64)  # [0.2, 0.6]
    gt = torch.tensor([[0.5, 0.2]], dtype=torch.float64)    # [0.4, 0.6]
    g = span_giou(TemporalSpan(0.2, 0.6), TemporalSpan(0.4, 0.6))
    l1 = 0.3
    assert g == pytest.approx(0.5)
    assert float(loss_span(pred, gt)) == pytest.approx(10 * l1 + (1 - g))


def test_loss_class_examples():
    logits = torch.log(torch.tensor([[1 - 1e-12, 1e-12], [0.5, 0.5]], dtype=torch.float64))
    val = float(loss_class(logits, Assignment([(0, 0)], [1])))
    assert val == pytest.approx(0.1 * math.log(2), abs=1e-9)
    uniform = torch.zeros(10, 2, dtype=torch.float64)
    val = float(loss_class(uniform, Assignment([(3, 0)], [i for i in range(10) if i != 3])))
    assert val == pytest.approx(math.log(2) + 9 * 0.1 * math.log(2))


def test_loss_saliency_examples():
    s = torch.tensor([0.1, 0.5, 0.0, 0.9], dtype=torch.float64)
    assert float(loss_saliency(s, [(0, 1)])) == pytest.approx(0.6)
    assert float(loss_saliency(s, [(1, 1)])) == pytest.approx(0.2)
    assert float(loss_saliency(s, [(3, 2)])) == 0
    assert float(loss_saliency(s, [])) == 0


def test_hinge_zero_gradient_when_margin_satisfied():
    s = torch.tensor([1.0, 0.0, 0.5, -1.0], dtype=torch.float64, requires_grad=True)
    loss_saliency(s, [(0, 1), (2, 3)]).backward()
    assert not s.grad.any()


def test_loss_contrastive_examples():
    s = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=torch.float64)
    e2 = math.exp(2)
    assert float(loss_contrastive(s, [0])) == pytest.approx(-math.log(e2 / (e2 + 3)))
    assert float(loss_contrastive(s, [0, 1, 2, 3])) == pytest.approx(0, abs=1e-12)
    big = torch.tensor([200.0, 0.0, 0.0], dtype=torch.float64)
    assert float(loss_contrastive(big, [0])) == pytest.approx(0, abs=1e-12)


def test_pair_sampling():
    g = torch.Generator().manual_seed(0)
    pairs = sample_saliency_pairs([[1, 2]], 5, g)
    assert len(pairs) == 1 and pairs[0][0] in (1, 2) and pairs[0][1] in (0, 3, 4)
    assert sample_saliency_pairs([[0, 1]], 2, g) == []
    a = sample_saliency_pairs([[1, 2], [4]], 6, torch.Generator().manual_seed(9))
    b = sample_saliency_pairs([[1, 2], [4]], 6, torch.Generator().manual_seed(9))
    assert a == b


TINY = ModelConfig(hidden_d=8, enc_layers=1, dec_layers=1, num_queries=4, attn_heads=2, ffn_dim=16,
                   dropout_transformer=0.0, dropout_projection=0.0, traj_feat_dim=6, query_feat_dim=5)


def _fixture(seed=3, batch=3):
    rng = np.random.default_rng(seed)
    model = init_params(TINY, seed).double().eval()
    lc = [5, 7, 6]
    traj = torch.zeros(batch, max(lc), 6, dtype=torch.float64)
    query = torch.from_numpy(rng.standard_normal((batch, 3, 5)))
    mask = torch.zeros(batch, max(lc), dtype=torch.bool)
    targets = []
    for b in range(batch):
        traj[b, :lc[b]] = torch.from_numpy(rng.standard_normal((lc[b], 6)))
        mask[b, :lc[b]] = True
        dur = 2.0 * lc[b]
        moments = [(0, 2), (3, lc[b])] if b == 1 else [(1, 3)]
        spans = [[(s + e) / dur, (e - s) * 2 / dur] for s, e in moments]
        targets.append({"spans": torch.tensor(spans, dtype=torch.float64),
                        "clip_ids": [list(range(s, e)) for s, e in moments]})
    out = model(traj, query, mask)
    return model, out, targets, mask


@pytest.mark.parametrize("contrastive", [False, True])
def test_total_loss_matches_reference(contrastive):
    _, out, targets, mask = _fixture()
    total, parts = total_loss(out, targets, W, contrastive, torch.Generator().manual_seed(0), mask)
    # replay the same pair draws for the reference
    g = torch.Generator().manual_seed(0)
    pairs = [sample_saliency_pairs(t["clip_ids"], int(mask[b].sum()), g) for b, t in enumerate(targets)]
    sal = [out["saliency"][b, :int(mask[b].sum())].detach().numpy() for b in range(len(targets))]
    ref_total, ref_parts = oracles.reference_total_loss(
        out["spans"].detach().numpy(), out["probs"].detach().numpy(), sal,
        [{"spans": t["spans"].numpy(), "clip_ids": t["clip_ids"]} for t in targets], pairs, W, contrastive)
    assert total.item() == pytest.approx(ref_total, abs=1e-6)
    for k, v in ref_parts.items():
        assert parts[k].item() == pytest.approx(v, abs=1e-6)
        assert parts[k].item() >= 0


def test_total_loss_zero_weights():
    _, out, targets, mask = _fixture()
    zero = LossWeights(0, 0, 0, 0, 0.2, 0, 0.1)
    total, _ = total_loss(out, targets, zero, True, torch.Generator().manual_seed(0), mask)
    assert float(total.detach()) == 0


def test_total_loss_perfect_prediction():
    gt = torch.tensor([[0.5, 0.5]], dtype=torch.float64)
    logits = torch.tensor([[[30.0, -30.0], [-30.0, 30.0]]], dtype=torch.float64)
    out = {"spans": torch.tensor([[[0.5, 0.5], [0.1, 0.1]]], dtype=torch.float64), "logits": logits,
           "probs": logits.softmax(-1), "saliency": torch.tensor([[-1.0, 1.0, 1.0, -1.0]], dtype=torch.float64)}
    _, parts = total_loss(out, [{"spans": gt, "clip_ids": [[1, 2]]}], W, False, torch.Generator().manual_seed(1))
    assert float(parts["span_l1"]) == 0 and float(parts["span_giou"]) == pytest.approx(0, abs=1e-12)
    assert float(parts["cls"]) < 1e-10 and float(parts["saliency"]) == 0


def test_total_loss_requires_ground_truth():
    _, out, targets, mask = _fixture()
    targets[0] = {"spans": torch.zeros(0, 2, dtype=torch.float64), "clip_ids": []}
    with pytest.raises(NoMatches):
        total_loss(out, targets, W, False, None, mask)
