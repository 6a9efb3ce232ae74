"""Training objectives: masked reconstruction, multi-similarity with online
mining, BCE pair classification, and the weighted joint loss."""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .backbone import MaskPlan

# Multi-similarity hyperparameters inherited from the GSV-Cities recipe;
# overridable, not re-derived here.
DEFAULT_MS_ALPHA = 1.0
DEFAULT_MS_BETA = 50.0
DEFAULT_MS_MARGIN = 0.5
DEFAULT_MINER_EPSILON = 0.1

PATCH_NORM_EPS = 1e-6


@dataclass(frozen=True)
class MSParams:
    alpha: float = DEFAULT_MS_ALPHA
    beta: float = DEFAULT_MS_BETA
    margin: float = DEFAULT_MS_MARGIN
    miner_epsilon: float = DEFAULT_MINER_EPSILON

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")


@dataclass
class MinedPairs:
    """Index pairs kept by the multi-similarity miner."""
    pos_anchors: torch.Tensor  # (P,) long
    pos_partners: torch.Tensor
    neg_anchors: torch.Tensor  # (Q,) long
    neg_partners: torch.Tensor

    @property
    def empty(self) -> bool:
        return self.pos_anchors.numel() == 0 and self.neg_anchors.numel() == 0


@dataclass
class MinedTriplets:
    anchors: torch.Tensor  # (T,) long
    positives: torch.Tensor
    negatives: torch.Tensor


def patch_normalize(target_pixels: torch.Tensor) -> torch.Tensor:
    """Standardize each patch vector to mean 0 / variance 1 (eps-guarded,
    so a constant patch maps to zeros)."""
    mean = target_pixels.mean(dim=-1, keepdim=True)
    var = target_pixels.var(dim=-1, unbiased=False, keepdim=True)
    return (target_pixels - mean) / torch.sqrt(var + PATCH_NORM_EPS)


def mim_loss(pred_pixels: torch.Tensor, true_pixels: torch.Tensor,
             mask_plan: MaskPlan) -> torch.Tensor:
    """Mean squared error against patch-normalized targets, masked patches
    only. Unmasked patches cannot influence the value."""
    if pred_pixels.shape != true_pixels.shape:
        raise ValueError("prediction/target shape mismatch")
    if mask_plan.n_masked == 0:
        raise ValueError("masked-patch loss undefined for an empty mask")
    target = patch_normalize(true_pixels)
    idx = mask_plan.masked_indices.to(pred_pixels.device)
    rows = torch.arange(pred_pixels.shape[0], device=pred_pixels.device)[:, None]
    diff = pred_pixels[rows, idx] - target[rows, idx]
    return diff.pow(2).mean()


def _similarity(descriptors: torch.Tensor) -> torch.Tensor:
    # Descriptors are unit-norm, so dot product = cosine.
    return descriptors @ descriptors.t()


def ms_miner(descriptors: torch.Tensor, labels: torch.Tensor,
             params: MSParams = MSParams()) -> MinedPairs:
    """Keep informative pairs per anchor: positives less similar than the
    hardest negative + eps, negatives more similar than the hardest
    positive - eps. Anchors missing either side mine nothing."""
    labels = torch.as_tensor(labels)
    sims = _similarity(descriptors)
    n = len(labels)
    eye = torch.eye(n, dtype=torch.bool, device=sims.device)
    same = (labels[:, None] == labels[None, :]) & ~eye
    diff = labels[:, None] != labels[None, :]

    pa, pp, na, np_ = [], [], [], []
    eps = params.miner_epsilon
    for i in range(n):
        pos_idx = same[i].nonzero(as_tuple=True)[0]
        neg_idx = diff[i].nonzero(as_tuple=True)[0]
        if pos_idx.numel() == 0 or neg_idx.numel() == 0:
            continue
        hardest_neg = sims[i, neg_idx].max()
        hardest_pos = sims[i, pos_idx].min()
        keep_pos = pos_idx[sims[i, pos_idx] < hardest_neg + eps]
        keep_neg = neg_idx[sims[i, neg_idx] > hardest_pos - eps]
        for k in keep_pos.tolist():
            pa.append(i), pp.append(k)
        for k in keep_neg.tolist():
            na.append(i), np_.append(k)

    mk = lambda xs: torch.tensor(xs, dtype=torch.long, device=descriptors.device)
    return MinedPairs(mk(pa), mk(pp), mk(na), mk(np_))


def multi_similarity_loss(descriptors: torch.Tensor, labels: torch.Tensor,
                          mined: MinedPairs,
                          params: MSParams = MSParams(),
                          count_all_anchors: bool = False) -> torch.Tensor:
    """Soft-max over mined negatives / soft-min over mined positives per
    anchor, averaged over anchors with at least one mined pair (or the
    whole batch with count_all_anchors)."""
    if mined.empty:
        return descriptors.new_zeros(())
    sims = _similarity(descriptors)
    n = descriptors.shape[0]
    total = descriptors.new_zeros(())
    active = 0
    for i in range(n):
        term = descriptors.new_zeros(())
        has_pair = False
        pos = mined.pos_partners[mined.pos_anchors == i]
        if pos.numel():
            s = sims[i, pos]
            term = term + torch.log1p(
                torch.exp(-params.alpha * (s - params.margin)).sum()) / params.alpha
            has_pair = True
        neg = mined.neg_partners[mined.neg_anchors == i]
        if neg.numel():
            s = sims[i, neg]
            term = term + torch.log1p(
                torch.exp(params.beta * (s - params.margin)).sum()) / params.beta
            has_pair = True
        if has_pair:
            total = total + term
            active += 1
    denom = n if count_all_anchors else max(active, 1)
    return total / denom


def hardest_batch_miner(descriptors: torch.Tensor,
                        labels: torch.Tensor) -> MinedTriplets:
    """Per anchor: least-similar same-place sample and most-similar
    different-place sample. Ties go to the lower index; anchors lacking
    either side are dropped."""
    labels = torch.as_tensor(labels)
    sims = _similarity(descriptors)
    n = len(labels)
    anchors, positives, negatives = [], [], []
    for i in range(n):
        pos_mask = (labels == labels[i]).clone()
        pos_mask[i] = False
        neg_mask = labels != labels[i]
        if not bool(pos_mask.any()) or not bool(neg_mask.any()):
            continue
        pos_s = sims[i].masked_fill(~pos_mask, float("inf"))
        neg_s = sims[i].masked_fill(~neg_mask, float("-inf"))
        # argmin/argmax return the first (lowest-index) extremum
        anchors.append(i)
        positives.append(int(pos_s.argmin()))
        negatives.append(int(neg_s.argmax()))
    mk = lambda xs: torch.tensor(xs, dtype=torch.long, device=descriptors.device)
    return MinedTriplets(mk(anchors), mk(positives), mk(negatives))


def bce_pair_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy of sigmoid(logit) vs {0,1} targets, in the
    fused numerically stable form."""
    logits = torch.as_tensor(logits)
    targets = torch.as_tensor(targets, dtype=logits.dtype, device=logits.device)
    if logits.numel() == 0:
        raise ValueError("pair loss needs at least one scored pair")
    if logits.shape != targets.shape:
        raise ValueError("logits/targets length mismatch")
    return F.binary_cross_entropy_with_logits(logits, targets)


def joint_loss(global_loss: torch.Tensor, pair_loss: torch.Tensor,
               w: float) -> torch.Tensor:
    """L = L_global + w * L_pair."""
    return global_loss + w * pair_loss
