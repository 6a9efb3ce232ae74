"""Loss and miner behavior against independent brute-force references."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from placerec import objectives
from placerec.backbone import MaskPlan
from placerec.objectives import (MSParams, bce_pair_loss, hardest_batch_miner,
                                 joint_loss, mim_loss, ms_miner,
                                 multi_similarity_loss, patch_normalize)


def _unit_rows(rows):
    t = torch.tensor(rows, dtype=torch.float64)
    return t / t.norm(dim=1, keepdim=True)


# --- masked reconstruction ---------------------------------------------------

def test_patch_normalize_moments():
    x = torch.randn(4, 10, 48, dtype=torch.float64)
    out = patch_normalize(x)
    assert torch.allclose(out.mean(-1), torch.zeros(4, 10, dtype=torch.float64),
                          atol=1e-12)
    assert torch.allclose(out.var(-1, unbiased=False),
                          torch.ones(4, 10, dtype=torch.float64), atol=1e-6)


def test_patch_normalize_constant_patch_is_zero():
    x = torch.full((1, 3, 12), 7.5, dtype=torch.float64)
    assert patch_normalize(x).abs().max() == 0.0


def test_mim_loss_matches_numpy_reference():
    g = torch.Generator().manual_seed(3)
    pred = torch.randn(2, 8, 12, generator=g, dtype=torch.float64)
    true = torch.randn(2, 8, 12, generator=g, dtype=torch.float64)
    plan = MaskPlan(masked_indices=torch.tensor([[1, 4, 6], [0, 2, 7]]),
                    mask_ratio=3 / 8)

    p, t = pred.numpy(), true.numpy()
    terms = []
    for b, idxs in enumerate([[1, 4, 6], [0, 2, 7]]):
        for i in idxs:
            patch = t[b, i]
            norm = (patch - patch.mean()) / np.sqrt(patch.var() + 1e-6)
            terms.extend(((p[b, i] - norm) ** 2).tolist())
    assert float(mim_loss(pred, true, plan)) == pytest.approx(
        float(np.mean(terms)), abs=1e-9)


def test_mim_loss_ignores_unmasked_patches_exactly():
    g = torch.Generator().manual_seed(4)
    pred = torch.randn(1, 6, 12, generator=g, dtype=torch.float64)
    true = torch.randn(1, 6, 12, generator=g, dtype=torch.float64)
    plan = MaskPlan(masked_indices=torch.tensor([[2, 5]]), mask_ratio=2 / 6)
    base = float(mim_loss(pred, true, plan))

    bumped = true.clone()
    bumped[0, 0] += 123.0  # unmasked patch
    assert float(mim_loss(pred, bumped, plan)) == base

    bumped = true.clone()
    # perturb one element: a uniform shift of a whole patch is absorbed by
    # the per-patch normalization, so a single-element poke is the real test
    bumped[0, 2, 3] += 1.0  # masked patch
    assert float(mim_loss(pred, bumped, plan)) != base


def test_mim_loss_rejects_bad_inputs():
    pred = torch.zeros(1, 4, 12)
    with pytest.raises(ValueError):
        mim_loss(pred, torch.zeros(1, 5, 12),
                 MaskPlan(torch.tensor([[0]]), 0.25))
    with pytest.raises(ValueError):
        mim_loss(pred, pred, MaskPlan(torch.zeros(1, 0, dtype=torch.long), 0.0))


# --- multi-similarity --------------------------------------------------------

def _reference_ms(desc, labels, params):
    """Pure-python double-loop evaluation of the mined multi-similarity
    loss (soft-min positives, soft-max negatives, averaged over active
    anchors)."""
    desc = [row.tolist() for row in desc]
    n = len(labels)
    sim = [[sum(a * b for a, b in zip(desc[i], desc[j])) for j in range(n)]
           for i in range(n)]
    total, active = 0.0, 0
    for i in range(n):
        pos = [j for j in range(n) if labels[j] == labels[i] and j != i]
        neg = [j for j in range(n) if labels[j] != labels[i]]
        if not pos or not neg:
            continue
        hardest_neg = max(sim[i][j] for j in neg)
        hardest_pos = min(sim[i][j] for j in pos)
        keep_pos = [j for j in pos
                    if sim[i][j] < hardest_neg + params.miner_epsilon]
        keep_neg = [j for j in neg
                    if sim[i][j] > hardest_pos - params.miner_epsilon]
        term, has = 0.0, False
        if keep_pos:
            term += math.log1p(sum(
                math.exp(-params.alpha * (sim[i][j] - params.margin))
                for j in keep_pos)) / params.alpha
            has = True
        if keep_neg:
            term += math.log1p(sum(
                math.exp(params.beta * (sim[i][j] - params.margin))
                for j in keep_neg)) / params.beta
            has = True
        if has:
            total += term
            active += 1
    return total / max(active, 1)


def test_multi_similarity_matches_reference():
    torch.manual_seed(5)
    desc = torch.randn(10, 6, dtype=torch.float64)
    desc = desc / desc.norm(dim=1, keepdim=True)
    labels = torch.tensor([0, 0, 1, 1, 2, 2, 3, 3, 0, 1])
    params = MSParams()
    mined = ms_miner(desc, labels, params)
    got = float(multi_similarity_loss(desc, labels, mined, params))
    want = _reference_ms(desc, labels.tolist(), params)
    assert got == pytest.approx(want, abs=1e-9)


def test_multi_similarity_empty_mining_returns_zero():
    desc = _unit_rows([[1.0, 0.0], [0.0, 1.0]])
    labels = torch.tensor([0, 1])
    # no positives anywhere -> nothing mined for either side of anchor 0?
    mined = ms_miner(desc, labels)
    # anchors lacking positives mine nothing at all
    assert mined.empty
    assert float(multi_similarity_loss(desc, labels, mined)) == 0.0


def test_ms_params_validation():
    with pytest.raises(ValueError):
        MSParams(alpha=0.0)
    with pytest.raises(ValueError):
        MSParams(beta=-1.0)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 2), min_size=4, max_size=10),
       st.integers(0, 2 ** 31 - 1))
def test_ms_miner_keep_conditions_hold(labels, seed):
    g = torch.Generator().manual_seed(seed)
    desc = torch.randn(len(labels), 5, generator=g, dtype=torch.float64)
    desc = desc / desc.norm(dim=1, keepdim=True)
    lab = torch.tensor(labels)
    params = MSParams()
    mined = ms_miner(desc, lab, params)
    sims = (desc @ desc.T).numpy()
    for a, p in zip(mined.pos_anchors.tolist(), mined.pos_partners.tolist()):
        assert labels[a] == labels[p] and a != p
        neg = [sims[a][j] for j in range(len(labels)) if labels[j] != labels[a]]
        assert sims[a][p] < max(neg) + params.miner_epsilon
    for a, q in zip(mined.neg_anchors.tolist(), mined.neg_partners.tolist()):
        assert labels[a] != labels[q]
        pos = [sims[a][j] for j in range(len(labels))
               if labels[j] == labels[a] and j != a]
        assert sims[a][q] > min(pos) - params.miner_epsilon


# --- hardest-batch mining ----------------------------------------------------

def test_hardest_batch_miner_brute_force():
    torch.manual_seed(6)
    desc = torch.randn(8, 4, dtype=torch.float64)
    desc = desc / desc.norm(dim=1, keepdim=True)
    labels = torch.tensor([0, 0, 0, 1, 1, 2, 2, 2])
    trip = hardest_batch_miner(desc, labels)
    sims = (desc @ desc.T).numpy()
    assert trip.anchors.tolist() == list(range(8))
    for a, p, q in zip(trip.anchors.tolist(), trip.positives.tolist(),
                       trip.negatives.tolist()):
        pos = [j for j in range(8) if labels[j] == labels[a] and j != a]
        neg = [j for j in range(8) if labels[j] != labels[a]]
        assert sims[a][p] == min(sims[a][j] for j in pos)
        assert sims[a][q] == max(sims[a][j] for j in neg)


def test_hardest_batch_miner_tie_goes_to_lower_index():
    # two identical negatives: the lower index must win
    desc = _unit_rows([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [1.0, 0.1]])
    labels = torch.tensor([0, 1, 1, 0])
    trip = hardest_batch_miner(desc, labels)
    a0 = trip.anchors.tolist().index(1)
    assert trip.positives.tolist()[a0] == 2  # only positive
    # anchor 1's negatives 0 and 3 — not tied; craft a tied case for anchor 0
    desc2 = _unit_rows([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    trip2 = hardest_batch_miner(desc2, torch.tensor([0, 1, 1]))
    # anchor 1 and 2 are each other's positive; anchor 1's and 2's negative
    # is index 0. Anchor 0 has no positive -> dropped.
    assert 0 not in trip2.anchors.tolist()


def test_hardest_batch_miner_drops_anchor_without_side():
    desc = _unit_rows([[1.0, 0.0], [0.0, 1.0]])
    trip = hardest_batch_miner(desc, torch.tensor([0, 1]))
    assert trip.anchors.numel() == 0


# --- pair BCE ----------------------------------------------------------------

def test_bce_pair_loss_matches_reference():
    logits = torch.tensor([1.3, -0.4, 2.2, 0.0], dtype=torch.float64)
    targets = torch.tensor([1.0, 0.0, 0.0, 1.0], dtype=torch.float64)
    ref = -np.mean([t * math.log(1 / (1 + math.exp(-z)))
                    + (1 - t) * math.log(1 - 1 / (1 + math.exp(-z)))
                    for z, t in zip(logits.tolist(), targets.tolist())])
    assert float(bce_pair_loss(logits, targets)) == pytest.approx(ref, abs=1e-9)


def test_bce_pair_loss_rejects_bad_inputs():
    with pytest.raises(ValueError):
        bce_pair_loss(torch.zeros(0), torch.zeros(0))
    with pytest.raises(ValueError):
        bce_pair_loss(torch.zeros(2), torch.zeros(3))


def test_joint_loss_weighting():
    g = torch.tensor(0.7, dtype=torch.float64)
    p = torch.tensor(0.3, dtype=torch.float64)
    assert float(joint_loss(g, p, 2.0)) == pytest.approx(1.3, abs=1e-12)
