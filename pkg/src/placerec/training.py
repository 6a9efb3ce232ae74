"""Two-stage training orchestration.

Stage 1: siamese masked reconstruction over place-aware pairs, AdamW with
a warmup+cosine schedule, front half of the encoder frozen. Stage 2:
joint descriptor + pair-classifier training over place batches, linear
LR decay, only the encoder tail plus decoder and heads trainable.
"""

import json
import math
import os
from dataclasses import asdict, dataclass, field

import cv2
import numpy as np
import torch

from . import data, objectives, sampling
from .backbone import (BackboneConfig, MaskPlan, PairBackbone, TokenGrid,
                       patchify)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class StageOneConfig:
    epochs: int = 500
    batch_places: int = 512
    learning_rate: float = 2e-4
    weight_decay: float = 0.05
    mask_ratio: float = 0.90
    image_size: int = 224
    freeze_front_fraction: float = 0.5
    seed: int = 0
    warmup_fraction: float = 0.05  # of total steps, linear warmup
    grad_clip: float | None = 1.0
    max_steps: int | None = None  # cap for desk-scale runs
    # Optional extra augmentation of the support view, applied on top of
    # whatever the pair source produced. Off by default: genuine second
    # views already differ from the anchor.
    support_augment: str = "none"  # none | mild | strong

    def __post_init__(self):
        if self.support_augment not in ("none", "mild", "strong"):
            raise ValueError("support_augment must be none, mild, or strong")
        if not (0.0 <= self.mask_ratio < 1.0):
            raise ValueError("mask_ratio must be in [0, 1)")
        if not (0.0 <= self.freeze_front_fraction <= 1.0):
            raise ValueError("freeze_front_fraction must be in [0, 1]")


@dataclass(frozen=True)
class StageTwoConfig:
    epochs: int = 10
    batch_places: int = 100
    images_per_place: int = 4
    initial_lr: float = 8e-5
    weight_decay: float = 5e-2
    image_size: int = 322
    trainable_tail_blocks: int = 6
    w: float = 2.0
    seed: int = 0
    grad_clip: float | None = 1.0
    # relative learning-rate scales: the unfrozen encoder tail usually wants
    # a gentler rate than the decoder/pair head, which start further from
    # their task.
    encoder_lr_scale: float = 1.0
    decoder_lr_scale: float = 1.0
    # With small batches, random place batches rarely contain a confusable
    # negative, so in-batch hardest mining has nothing hard to mine. This
    # fraction of batches is instead composed of descriptor-space
    # neighbours, mixing hard and random negatives across an epoch.
    similarity_batching: float = 0.0
    # color jitter + small random resized crop on fine-tuning batches
    augment: bool = True

    def __post_init__(self):
        if self.images_per_place < 2:
            raise ValueError("need at least two images per place")
        if self.encoder_lr_scale <= 0 or self.decoder_lr_scale <= 0:
            raise ValueError("learning-rate scales must be positive")
        if not (0.0 <= self.similarity_batching <= 1.0):
            raise ValueError("similarity_batching must be in [0, 1]")


# --- freezing ---------------------------------------------------------------

def apply_freeze_policy(model: PairBackbone, stage: int, cfg) -> PairBackbone:
    """Stage 1: freeze patch embedding and the front fraction of encoder
    blocks. Stage 2: freeze the whole encoder trunk (embedding, tokens,
    final norm) except the last trainable_tail_blocks blocks; decoder and
    heads stay trainable in both stages."""
    depth = model.cfg.encoder_depth
    for p in model.parameters():
        p.requires_grad_(True)
    if stage == 1:
        n_frozen = int(math.floor(depth * cfg.freeze_front_fraction))
        model.patch_proj.requires_grad_(False)
        for blk in model.encoder_blocks[:n_frozen]:
            blk.requires_grad_(False)
    elif stage == 2:
        tail = cfg.trainable_tail_blocks
        if tail > depth:
            raise ValueError(
                f"trainable_tail_blocks={tail} exceeds encoder depth {depth}")
        model.patch_proj.requires_grad_(False)
        model.cls_token.requires_grad_(False)
        model.register_tokens.requires_grad_(False)
        model.mask_token.requires_grad_(False)
        model.encoder_norm.requires_grad_(False)
        for blk in model.encoder_blocks[:depth - tail]:
            blk.requires_grad_(False)
    else:
        raise ValueError(f"unknown stage {stage}")
    return model


def frozen_parameter_names(model: PairBackbone) -> list:
    return [n for n, p in model.named_parameters() if not p.requires_grad]


# --- schedules --------------------------------------------------------------

def cosine_schedule(total_steps: int, warmup_fraction: float):
    warmup = max(int(round(total_steps * warmup_fraction)), 0)

    def factor(step: int) -> float:
        if warmup and step < warmup:
            return (step + 1) / warmup
        span = max(total_steps - warmup, 1)
        t = min(step - warmup, span) / span
        return 0.5 * (1.0 + math.cos(math.pi * t))

    return factor


def linear_schedule(total_steps: int):
    def factor(step: int) -> float:
        return max(1.0 - step / max(total_steps, 1), 0.0)

    return factor


def _make_optimizer(model, lr, weight_decay,
                    encoder_scale=1.0, decoder_scale=1.0):
    """AdamW over trainable parameters, optionally with separate rates for
    the encoder trunk and the decoder/pair head. Each group carries its
    ``base_lr`` so schedules can rescale groups independently."""
    if encoder_scale == 1.0 and decoder_scale == 1.0:
        params = [p for p in model.parameters() if p.requires_grad]
        groups = [{"params": params, "lr": lr, "base_lr": lr}]
    else:
        enc, dec, heads = [], [], []
        for name, p in model.named_parameters():
            if not p.requires_grad:
                continue
            if name.startswith(("decoder", "pair_head")):
                dec.append(p)
            elif name.startswith("global_head"):
                heads.append(p)
            else:
                enc.append(p)
        groups = [g for g in (
            {"params": enc, "lr": lr * encoder_scale,
             "base_lr": lr * encoder_scale},
            {"params": dec, "lr": lr * decoder_scale,
             "base_lr": lr * decoder_scale},
            {"params": heads, "lr": lr, "base_lr": lr},
        ) if g["params"]]
    return torch.optim.AdamW(groups, lr=lr, weight_decay=weight_decay)


# --- pair sources -----------------------------------------------------------

class GroupedPlaceSource:
    """Positive pairs from place-grouped images (>= 4 per place)."""

    def __init__(self, places: list, root: str = "", loader=None):
        self.places, dropped = data.filter_grouped(places)
        self.dropped = dropped
        self.root = root
        self.loader = loader or data.load_image

    @property
    def num_places(self) -> int:
        return len(self.places)

    def sample(self, place_idx: int, rng: np.random.Generator):
        pair = sampling.sample_grouped_pair(self.places[place_idx], rng)
        img_a = self.loader(os.path.join(self.root, pair.image_a.path))
        img_b = self.loader(os.path.join(self.root, pair.image_b.path))
        return sampling.PairSample(img_a, img_b, pair.place_id, None, "grouped")


class CellPairSource:
    """Street-view-style pairs: focal-point crops from panoramas in a cell."""

    def __init__(self, panos: list, cell_size: float = sampling.DEFAULT_CELL_SIZE,
                 crop: int | None = None, loader=None,
                 max_attempts: int = sampling.DEFAULT_MAX_ATTEMPTS):
        self.cells = sampling.partition_cells(panos, cell_size)
        self.crop = crop
        self.loader = loader or data.load_image
        self.max_attempts = max_attempts

    @property
    def num_places(self) -> int:
        return len(self.cells)

    def sample(self, cell_idx: int, rng: np.random.Generator):
        return sampling.sample_focal_pair(
            self.cells[cell_idx], rng, max_attempts=self.max_attempts,
            crop=self.crop, loader=self.loader)


def mild_augment(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Fine-tuning augmentation: small random resized crop plus color
    jitter (channel gains and a brightness shift)."""
    c, h, w = image.shape
    scale = rng.uniform(0.92, 1.0)
    ch, cw = max(int(h * scale), 8), max(int(w * scale), 8)
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    crop = image[:, top:top + ch, left:left + cw].transpose(1, 2, 0)
    out = cv2.resize(crop.astype(np.float32), (w, h),
                     interpolation=cv2.INTER_LINEAR)
    out = out * rng.uniform(0.9, 1.1, size=3) + rng.uniform(-12, 12)
    return np.clip(out, 0, 255).astype(np.uint8).transpose(2, 0, 1)


def strong_augment(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Aggressive view synthesis for the pairless-pretraining ablation:
    random resized crop, channel gains, brightness shift, random flip."""
    c, h, w = image.shape
    scale = rng.uniform(0.3, 0.8)
    ch, cw = max(int(h * scale), 8), max(int(w * scale), 8)
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    crop = image[:, top:top + ch, left:left + cw].transpose(1, 2, 0)
    out = cv2.resize(crop.astype(np.float32), (w, h),
                     interpolation=cv2.INTER_LINEAR)
    out = out * rng.uniform(0.6, 1.4, size=3) + rng.uniform(-30, 30)
    if rng.random() < 0.5:
        out = out[:, ::-1]
    return np.clip(out, 0, 255).astype(np.uint8).transpose(2, 0, 1)


class PairlessAugmentSource:
    """Ablation wrapper: the second view is a strong augmentation of the
    first instead of another image of the place, so pre-training never sees
    genuine cross-view pairs."""

    def __init__(self, inner):
        self.inner = inner

    @property
    def num_places(self) -> int:
        return self.inner.num_places

    def sample(self, place_idx: int, rng: np.random.Generator):
        pair = self.inner.sample(place_idx, rng)
        if pair is None:
            return None
        pair.image_b = strong_augment(pair.image_a, rng)
        return pair


def build_epoch_schedule(sources: list, seed: int, epoch: int) -> list:
    """One (source_idx, place_idx) entry per place across all sources,
    shuffled with the epoch-seeded RNG."""
    if not sources:
        raise ValueError("need at least one place source")
    entries = [(si, pi) for si, src in enumerate(sources)
               for pi in range(src.num_places)]
    rng = np.random.default_rng([seed, 0x5EED, epoch])
    rng.shuffle(entries)
    return entries


# --- stage 1 ----------------------------------------------------------------

def stage1_step(model: PairBackbone, images_a: torch.Tensor,
                images_b: torch.Tensor, optimizer, cfg: StageOneConfig,
                generator: torch.Generator) -> float:
    """One siamese masked-reconstruction step; image A is masked and
    reconstructed with cross-attention help from unmasked image B."""
    model.train()
    plan = MaskPlan.random(images_a.shape[0], model.cfg.num_patches,
                           cfg.mask_ratio, generator)
    dense_a, _ = model.encode(images_a, plan)
    dense_b, _ = model.encode(images_b)
    decoded = model.decode(dense_a, dense_b)
    pred = model.reconstruct_pixels(decoded)
    target = patchify(images_a, model.cfg.patch_size)
    loss = objectives.mim_loss(pred, target, plan)
    optimizer.zero_grad()
    loss.backward()
    if cfg.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(
            [p for p in model.parameters() if p.requires_grad], cfg.grad_clip)
    optimizer.step()
    return float(loss.detach())


def run_stage1(model: PairBackbone, sources: list, cfg: StageOneConfig,
               log_path: str | None = None) -> dict:
    """Pre-train over place-aware pairs; returns the loss history and
    skip/step audit counters."""
    apply_freeze_policy(model, 1, cfg)
    optimizer = _make_optimizer(model, cfg.learning_rate, cfg.weight_decay)
    places_per_epoch = sum(s.num_places for s in sources)
    steps_per_epoch = max(math.ceil(places_per_epoch / cfg.batch_places), 1)
    total_steps = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    factor = cosine_schedule(total_steps, cfg.warmup_fraction)
    generator = torch.Generator().manual_seed(cfg.seed)

    losses, skipped_samples, step = [], 0, 0
    log = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            schedule = build_epoch_schedule(sources, cfg.seed, epoch)
            rng = np.random.default_rng([cfg.seed, 0xA11CE, epoch])
            for start in range(0, len(schedule), cfg.batch_places):
                if step >= total_steps:
                    return {"losses": losses, "steps": step,
                            "skipped_samples": skipped_samples}
                batch_a, batch_b = [], []
                for si, pi in schedule[start:start + cfg.batch_places]:
                    pair = sources[si].sample(pi, rng)
                    if pair is None:
                        skipped_samples += 1
                        continue
                    image_b = pair.image_b
                    if cfg.support_augment == "mild":
                        image_b = mild_augment(image_b, rng)
                    elif cfg.support_augment == "strong":
                        image_b = strong_augment(image_b, rng)
                    batch_a.append(data.preprocess(pair.image_a, cfg.image_size))
                    batch_b.append(data.preprocess(image_b, cfg.image_size))
                if not batch_a:
                    continue
                lr = cfg.learning_rate * factor(step)
                for group in optimizer.param_groups:
                    group["lr"] = group.get("base_lr", cfg.learning_rate) * factor(step)
                loss = stage1_step(model, torch.stack(batch_a),
                                   torch.stack(batch_b), optimizer, cfg,
                                   generator)
                losses.append(loss)
                step += 1
                if log:
                    log.write(json.dumps({"step": step, "lr": lr, "loss": loss,
                                          "skipped": skipped_samples}) + "\n")
    finally:
        if log:
            log.close()
    return {"losses": losses, "steps": step, "skipped_samples": skipped_samples}


# --- stage 2 ----------------------------------------------------------------

def _subgrid(dense: TokenGrid, idx: torch.Tensor) -> TokenGrid:
    return TokenGrid(tokens=dense.tokens[idx], grid_h=dense.grid_h,
                     grid_w=dense.grid_w, n_special=0,
                     provenance="encoder_dense")


def stage2_step(model: PairBackbone, images: torch.Tensor,
                labels: torch.Tensor, cfg: StageTwoConfig,
                optimizer=None, ms_params: objectives.MSParams | None = None):
    """Joint step: multi-similarity on descriptors, BCE on hardest-mined
    (anchor, positive) / (anchor, negative) pairs through the decoder.

    Returns (loss, global_loss, pair_loss) floats, or None when the batch
    is degenerate (fewer than two places) and the step is skipped.
    """
    ms_params = ms_params or objectives.MSParams()
    labels = torch.as_tensor(labels)
    if len(torch.unique(labels)) < 2:
        return None
    model.train()
    dense, cls = model.encode(images)
    descriptors = model.project_global(cls)

    mined = objectives.ms_miner(descriptors.detach(), labels, ms_params)
    loss_g = objectives.multi_similarity_loss(descriptors, labels, mined,
                                              ms_params)
    triplets = objectives.hardest_batch_miner(descriptors.detach(), labels)
    if triplets.anchors.numel() == 0:
        return None
    anchor_grid = _subgrid(dense, triplets.anchors)
    logits = torch.cat([
        model.pair_score(anchor_grid, _subgrid(dense, triplets.positives)),
        model.pair_score(anchor_grid, _subgrid(dense, triplets.negatives)),
    ])
    targets = torch.cat([torch.ones(len(triplets.anchors)),
                         torch.zeros(len(triplets.anchors))])
    loss_p = objectives.bce_pair_loss(logits, targets)
    loss = objectives.joint_loss(loss_g, loss_p, cfg.w)
    if optimizer is not None:
        optimizer.zero_grad()
        loss.backward()
        if cfg.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(
                [p for p in model.parameters() if p.requires_grad],
                cfg.grad_clip)
        optimizer.step()
    return float(loss.detach()), float(loss_g.detach()), float(loss_p.detach())


@dataclass
class ValContext:
    """Frozen validation split with distance ground truth."""
    db_images: torch.Tensor
    db_ids: list
    query_images: torch.Tensor
    query_ids: list
    ground_truth: object  # evaluation.GroundTruth
    top_n: int = 5


def validate_and_select(model: PairBackbone, val: ValContext) -> float:
    """Refined Recall@1 on the validation split (the selection metric)."""
    from . import evaluation, retrieval
    index = retrieval.extract_descriptors(model, val.db_images, val.db_ids)
    _, refined = evaluation.evaluate_two_stage(
        model, index, val.query_images, val.query_ids, val.ground_truth,
        val.top_n, [1])
    return refined.recalls[1]


def _similarity_order(model: PairBackbone, places: list, root: str,
                      cfg: StageTwoConfig, rng: np.random.Generator,
                      loader) -> np.ndarray:
    """Order places so each batch holds descriptor-space neighbours.

    One image per place is embedded with the current model; places are
    then grouped greedily. A cfg.similarity_batching fraction of groups
    pulls in the seed place's nearest still-unassigned neighbours; the
    rest draw random partners. Concatenated groups form the epoch order,
    so chunking by batch_places recovers the groups.
    """
    was_training = model.training
    model.eval()
    descs = []
    with torch.no_grad():
        for place in places:
            k = int(rng.integers(len(place.images)))
            arr = loader(os.path.join(root, place.images[k].path))
            img = data.preprocess(arr, cfg.image_size).unsqueeze(0)
            descs.append(model.forward_descriptor(img)[0])
    if was_training:
        model.train()
    sims = (torch.stack(descs) @ torch.stack(descs).T).numpy()
    np.fill_diagonal(sims, -np.inf)
    unassigned = set(range(len(places)))
    order = []
    for seed_pi in rng.permutation(len(places)):
        if seed_pi not in unassigned:
            continue
        unassigned.discard(seed_pi)
        group = [seed_pi]
        hard = rng.random() < cfg.similarity_batching
        while len(group) < cfg.batch_places and unassigned:
            if hard:
                ranked = np.argsort(-sims[seed_pi])
                nxt = next(int(j) for j in ranked if j in unassigned)
            else:
                pool = sorted(unassigned)
                nxt = int(pool[rng.integers(len(pool))])
            unassigned.discard(nxt)
            group.append(nxt)
        order.extend(group)
    return np.array(order)


def run_stage2(model: PairBackbone, places: list, root: str,
               cfg: StageTwoConfig, val: ValContext | None = None,
               log_path: str | None = None, loader=None) -> dict:
    """Fine-tune jointly; tracks per-epoch validation and keeps the
    checkpoint with the best refined Recall@1 (ties -> earlier epoch)."""
    places, dropped = data.filter_grouped(places, cfg.images_per_place)
    if not places:
        raise ValueError("no places with enough images for stage 2")
    apply_freeze_policy(model, 2, cfg)
    optimizer = _make_optimizer(model, cfg.initial_lr, cfg.weight_decay,
                                encoder_scale=cfg.encoder_lr_scale,
                                decoder_scale=cfg.decoder_lr_scale)
    steps_per_epoch = max(math.ceil(len(places) / cfg.batch_places), 1)
    factor = linear_schedule(cfg.epochs * steps_per_epoch)
    loader = loader or data.load_image

    history = {"epochs": [], "dropped_places": dropped, "steps": 0,
               "skipped_batches": 0}
    best = {"metric": -1.0, "epoch": -1, "state": None}
    step = 0
    log = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            rng = np.random.default_rng([cfg.seed, 0xF17E, epoch])
            if cfg.similarity_batching > 0.0:
                order = _similarity_order(model, places, root, cfg, rng,
                                          loader)
            else:
                order = rng.permutation(len(places))
            epoch_losses = []
            for start in range(0, len(places), cfg.batch_places):
                imgs, labels = [], []
                for pi in order[start:start + cfg.batch_places]:
                    place = places[pi]
                    picks = rng.choice(len(place.images),
                                       size=min(cfg.images_per_place,
                                                len(place.images)),
                                       replace=False)
                    for k in picks:
                        arr = loader(os.path.join(root, place.images[k].path))
                        if cfg.augment:
                            arr = mild_augment(arr, rng)
                        imgs.append(data.preprocess(arr, cfg.image_size))
                        labels.append(pi)
                lr = cfg.initial_lr * factor(step)
                for group in optimizer.param_groups:
                    group["lr"] = group.get("base_lr", cfg.initial_lr) * factor(step)
                out = stage2_step(model, torch.stack(imgs),
                                  torch.tensor(labels), cfg, optimizer)
                if out is None:
                    history["skipped_batches"] += 1
                    continue
                loss, loss_g, loss_p = out
                epoch_losses.append(loss)
                step += 1
                if log:
                    log.write(json.dumps({
                        "step": step, "lr": lr, "loss": loss, "L_g": loss_g,
                        "L_p": loss_p,
                        "skipped": history["skipped_batches"]}) + "\n")
            entry = {"epoch": epoch,
                     "mean_loss": float(np.mean(epoch_losses))
                     if epoch_losses else None}
            if val is not None:
                metric = validate_and_select(model, val)
                entry["refined_recall1"] = metric
                if metric > best["metric"]:
                    best = {"metric": metric, "epoch": epoch,
                            "state": {k: v.detach().clone() for k, v in
                                      model.state_dict().items()}}
            history["epochs"].append(entry)
    finally:
        if log:
            log.close()
    history["steps"] = step
    if val is not None and best["state"] is not None:
        model.load_state_dict(best["state"])
        history["best_epoch"] = best["epoch"]
        history["best_refined_recall1"] = best["metric"]
    return history


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(path: str, model: PairBackbone, optimizer=None,
                    epoch: int = 0, extra: dict | None = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "backbone_config": asdict(model.cfg),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer else None,
        "epoch": epoch,
        "torch_rng_state": torch.get_rng_state(),
        "channel_mean": data.DEFAULT_MEAN,
        "channel_std": data.DEFAULT_STD,
    }
    if extra:
        payload.update(extra)
    torch.save(payload, path)


def load_checkpoint(path: str) -> tuple[PairBackbone, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    model = PairBackbone(BackboneConfig(**payload["backbone_config"]))
    model.load_state_dict(payload["model_state"])
    return model, payload
