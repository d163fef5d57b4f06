"""Losses and the training stages (base training, MTFA / iMTFA fine-tuning, one-stage ablations)."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import BinaryMask, Box, InstanceAnnotation
from .imprint import ALPHA_MTFA, ClassifierHead, ClassRegistry, initial_registry
from .model import (
    COMPONENTS,
    ROI_BOX_WEIGHTS,
    DetectorModel,
    ModelConfig,
    box_iou_tensor,
    boxes_to_tensor,
    build_model,
    encode_boxes,
    roi_pool,
)
from .shapesdata import ClassSplit, ShapesDataset

log = logging.getLogger(__name__)

VARIANTS = {
    # variant: (head mode, classifier metric, second stage)
    "imtfa": ("agnostic", "cosine", "imtfa"),
    "mtfa": ("specific", "cosine", "mtfa"),
    "ca_mtfa": ("agnostic", "cosine", "mtfa"),
    "ca_mtfa_no_ft_mask": ("agnostic", "cosine", "mtfa"),
    "one_stage_cosine": ("agnostic", "cosine", None),
    "one_stage_linear": ("agnostic", "linear", None),
}

PARAM_GROUPS = COMPONENTS + ("classifier",)

STAGE2_LR = {"imtfa": 0.0007, "mtfa": 0.0005}


class TrainingError(RuntimeError):
    pass


class FreezeViolation(TrainingError):
    pass


class SplitViolation(TrainingError):
    pass


def default_freeze_map(variant: str, stage: int) -> dict[str, bool]:
    """Components held fixed during ``stage`` (1 or 2) of ``variant``."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    frozen = {name: False for name in PARAM_GROUPS}
    if stage == 1:
        return frozen
    second = VARIANTS[variant][2]
    if second is None:
        raise ValueError(f"variant {variant!r} has no second stage")
    if second == "mtfa":
        frozen.update(backbone=True, rpn=True, roi_extractor=True)
        if variant == "ca_mtfa_no_ft_mask":
            frozen["mask_head"] = True
    else:
        frozen.update(backbone=True, rpn=True, mask_head=True)
    return frozen


@dataclass
class TrainConfig:
    variant: str = "imtfa"
    lr_stage1: float = 0.02
    lr_stage2: Optional[float] = None
    batch_size: int = 4
    iterations_stage1: int = 2000
    iterations_stage2: int = 500
    seed: int = 0
    alpha: float = ALPHA_MTFA
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 10.0
    rois_per_image: int = 32
    fg_fraction: float = 0.25
    rpn_batch_per_image: int = 64
    flip: bool = True
    freeze_override: dict = field(default_factory=dict)
    freeze_mask_in_imtfa_stage2: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        head_mode = VARIANTS[self.variant][0]
        self.model = replace(self.model, box_mode=head_mode, mask_mode=head_mode)
        if self.lr_stage2 is None:
            second = VARIANTS[self.variant][2]
            self.lr_stage2 = STAGE2_LR.get(second or "imtfa", 0.0007)
        if self.lr_stage1 <= 0 or self.lr_stage2 <= 0:
            raise ValueError("learning rates must be positive")

    @property
    def metric(self) -> str:
        return VARIANTS[self.variant][1]

    def freeze_map(self, stage: int) -> dict[str, bool]:
        frozen = default_freeze_map(self.variant, stage)
        if stage == 2 and VARIANTS[self.variant][2] == "imtfa" and not self.freeze_mask_in_imtfa_stage2:
            frozen["mask_head"] = False
        frozen.update(self.freeze_override.get(f"stage{stage}", {}))
        return frozen

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


@dataclass
class LossBreakdown:
    cls_loss: torch.Tensor
    box_loss: torch.Tensor
    mask_loss: torch.Tensor
    rpn_cls_loss: torch.Tensor
    rpn_box_loss: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.cls_loss + self.box_loss + self.mask_loss + self.rpn_cls_loss + self.rpn_box_loss

    def as_floats(self) -> dict[str, float]:
        return {
            "cls_loss": float(self.cls_loss.detach()),
            "box_loss": float(self.box_loss.detach()),
            "mask_loss": float(self.mask_loss.detach()),
            "rpn_cls_loss": float(self.rpn_cls_loss.detach()),
            "rpn_box_loss": float(self.rpn_box_loss.detach()),
        }


@dataclass
class Batch:
    images: torch.Tensor  # N x 3 x H x W, normalised
    annotations: list[list[InstanceAnnotation]]
    image_ids: list[int]


class BatchLoader:
    """Seeded, endlessly repeating batch source that records every class id it serves."""

    def __init__(self, dataset: ShapesDataset, batch_size: int, seed: int, flip: bool = True):
        self.dataset = dataset
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self.flip = flip
        self.by_image = dataset.manifest.by_image()
        self.image_ids = sorted(i for i, anns in self.by_image.items() if any(not a.ignore for a in anns))
        if not self.image_ids:
            raise TrainingError("no trainable images in dataset")
        self.served_class_ids: set[int] = set()

    def _flip(self, img: np.ndarray, anns: list[InstanceAnnotation]):
        w = img.shape[1]
        out = []
        for a in anns:
            box = Box(w - a.box.x2, a.box.y1, w - a.box.x1, a.box.y2)
            mask = BinaryMask(a.mask.data[:, ::-1]) if a.mask is not None else None
            out.append(replace(a, box=box, mask=mask))
        return img[:, ::-1], out

    def __iter__(self) -> Iterator[Batch]:
        while True:
            order = self.rng.permutation(len(self.image_ids))
            for start in range(0, len(order) - self.batch_size + 1, self.batch_size):
                ids = [self.image_ids[i] for i in order[start : start + self.batch_size]]
                imgs, anns = [], []
                for image_id in ids:
                    img = self.dataset.image(image_id)
                    a = self.by_image[image_id]
                    if self.flip and self.rng.random() < 0.5:
                        img, a = self._flip(img, a)
                    imgs.append(np.ascontiguousarray(img))
                    anns.append(a)
                    self.served_class_ids.update(x.class_id for x in a)
                yield Batch(DetectorModel.normalize(np.stack(imgs)), anns, ids)


# ---------------------------------------------------------------------------
# losses


def _sample(mask: torch.Tensor, limit: int, g: torch.Generator) -> torch.Tensor:
    idx = torch.nonzero(mask).flatten()
    if len(idx) > limit:
        idx = idx[torch.randperm(len(idx), generator=g)[:limit]]
    return idx


def _rpn_losses(model: DetectorModel, feature, batch: Batch, rpn_out, config: TrainConfig, g):
    logits, deltas = rpn_out
    anchors = model.anchors(feature.shape[-2], feature.shape[-1])
    cls_terms, box_terms, n_sampled = [], [], 0
    for i, anns in enumerate(batch.annotations):
        gt = boxes_to_tensor([a.box for a in anns if not a.ignore])
        ign = boxes_to_tensor([a.box for a in anns if a.ignore])
        labels = torch.full((len(anchors),), -1, dtype=torch.long)
        if len(gt):
            iou = box_iou_tensor(anchors, gt)
            best, which = iou.max(dim=1)
            labels[best < 0.3] = 0
            labels[best >= 0.7] = 1
            per_gt = iou.max(dim=0).values
            for j in range(len(gt)):
                if per_gt[j] > 0:
                    labels[(iou[:, j] == per_gt[j])] = 1
        else:
            labels[:] = 0
            which = torch.zeros(len(anchors), dtype=torch.long)
        if len(ign):
            near_ignore = box_iou_tensor(anchors, ign).max(dim=1).values >= 0.3
            labels[near_ignore & (labels == 0)] = -1
        per_image = config.rpn_batch_per_image
        pos = _sample(labels == 1, per_image // 2, g)
        neg = _sample(labels == 0, per_image - len(pos), g)
        chosen = torch.cat([pos, neg])
        n_sampled += len(chosen)
        cls_terms.append(
            F.binary_cross_entropy_with_logits(logits[i, chosen], labels[chosen].float(), reduction="sum")
        )
        if len(pos):
            target = encode_boxes(gt[which[pos]], anchors[pos])
            box_terms.append(F.smooth_l1_loss(deltas[i, pos], target, beta=1.0 / 9, reduction="sum"))
    denom = max(n_sampled, 1)
    cls = torch.stack(cls_terms).sum() / denom
    box = torch.stack(box_terms).sum() / denom if box_terms else logits.sum() * 0.0
    return cls, box


def mask_targets(mask: np.ndarray, boxes: torch.Tensor, size: int) -> torch.Tensor:
    """Ground-truth mask cropped to ``boxes`` and resampled to ``size x size``, binarised at 0.5."""
    m = torch.from_numpy(np.ascontiguousarray(mask, dtype=np.float32))[None]
    return (roi_pool(m, boxes, size, 1.0) >= 0.5).float()[:, 0]


def compute_losses(
    batch: Batch,
    model: DetectorModel,
    classifier: ClassifierHead,
    config: TrainConfig,
    frozen: Optional[dict] = None,
    proposal_mode: str = "learned",
    generator: Optional[torch.Generator] = None,
) -> LossBreakdown:
    frozen = frozen or {}
    g = generator or torch.Generator().manual_seed(config.seed)
    cfg = model.config
    h, w = batch.images.shape[-2:]
    zero = batch.images.new_zeros(())
    if frozen.get("backbone"):
        with torch.no_grad():
            feature = model.backbone_forward(batch.images)
    else:
        feature = model.backbone_forward(batch.images)

    rpn_cls = rpn_box = zero
    if proposal_mode == "learned":
        if frozen.get("rpn") and frozen.get("backbone"):
            with torch.no_grad():
                rpn_out = model.rpn_forward(feature)
        else:
            rpn_out = model.rpn_forward(feature)
        if not frozen.get("rpn"):
            rpn_cls, rpn_box = _rpn_losses(model, feature, batch, rpn_out, config, g)
        proposals = model.learned_proposals(feature, h, w, training=True, rpn_out=rpn_out)
        proposal_boxes = [p.boxes for p in proposals]
    elif proposal_mode == "oracle":
        proposal_boxes = [boxes_to_tensor([a.box for a in anns if not a.ignore]) for anns in batch.annotations]
    else:
        raise ValueError(f"unknown proposal mode {proposal_mode!r}")

    roi_boxes, roi_batch, roi_labels, roi_targets, roi_gt_index = [], [], [], [], []
    gt_masks: list[tuple[int, np.ndarray]] = []
    for i, anns in enumerate(batch.annotations):
        real = [a for a in anns if not a.ignore]
        gt = boxes_to_tensor([a.box for a in real])
        ign = boxes_to_tensor([a.box for a in anns if a.ignore])
        props = torch.cat([proposal_boxes[i], gt]) if proposal_mode == "learned" else proposal_boxes[i]
        if len(props) == 0:
            continue
        if len(gt):
            iou = box_iou_tensor(props, gt)
            best, which = iou.max(dim=1)
        else:
            best = torch.zeros(len(props))
            which = torch.zeros(len(props), dtype=torch.long)
        fg_mask = best >= 0.5
        bg_mask = ~fg_mask
        if len(ign):
            bg_mask &= box_iou_tensor(props, ign).max(dim=1).values < 0.5
        n_fg_max = int(round(config.rois_per_image * config.fg_fraction))
        if proposal_mode == "oracle":
            n_fg_max = config.rois_per_image
        fg = _sample(fg_mask, n_fg_max, g)
        bg = _sample(bg_mask, config.rois_per_image - len(fg), g)
        for idx, is_fg in ((fg, True), (bg, False)):
            if not len(idx):
                continue
            roi_boxes.append(props[idx])
            roi_batch.append(torch.full((len(idx),), i, dtype=torch.long))
            if is_fg:
                roi_labels.extend(real[int(j)].class_id for j in which[idx])
                roi_targets.append(encode_boxes(gt[which[idx]], props[idx], ROI_BOX_WEIGHTS))
                for j in which[idx]:
                    gt_masks.append((i, int(j)))
            else:
                roi_labels.extend([None] * len(idx))
                roi_targets.append(torch.zeros((len(idx), 4)))
    if not roi_boxes:
        return LossBreakdown(zero, zero, zero, rpn_cls, rpn_box)

    boxes = torch.cat(roi_boxes)
    bidx = torch.cat(roi_batch)
    targets = torch.cat(roi_targets)
    pooled = model.pool(feature, boxes, bidx)
    z = model.embed(pooled)
    scores = classifier(z)
    bg_col = classifier.background_index
    label_cols = torch.tensor(
        [bg_col if c is None else classifier.class_ids.index(c) for c in roi_labels], dtype=torch.long
    )
    cls_loss = F.cross_entropy(scores, label_cols)

    fg_rows = torch.tensor([i for i, c in enumerate(roi_labels) if c is not None], dtype=torch.long)
    box_loss = mask_loss = zero
    if len(fg_rows):
        fg_ids = [roi_labels[int(i)] for i in fg_rows]
        if not frozen.get("box_head"):
            pred = model.box_deltas(z[fg_rows], fg_ids)
            box_loss = F.smooth_l1_loss(pred, targets[fg_rows], beta=1.0, reduction="sum") / len(roi_labels)
        if not frozen.get("mask_head"):
            logits = model.mask_logits(pooled[fg_rows], fg_ids)
            tgt = []
            for row, (i, j) in zip(fg_rows, gt_masks):
                real = [a for a in batch.annotations[i] if not a.ignore]
                tgt.append(mask_targets(real[j].mask.data, boxes[row : row + 1], cfg.mask_size))
            mask_loss = F.binary_cross_entropy_with_logits(logits, torch.cat(tgt))
    return LossBreakdown(cls_loss, box_loss, mask_loss, rpn_cls, rpn_box)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: DetectorModel
    registry: ClassRegistry
    history: list[dict] = field(default_factory=list)
    served_class_ids: set = field(default_factory=set)


def _check_classes(dataset: ShapesDataset, allowed: Sequence[int], stage: str) -> None:
    present = dataset.manifest.class_ids_present()
    extra = present - set(allowed)
    if extra:
        raise SplitViolation(f"{stage}: training data contains classes {sorted(extra)} outside {sorted(allowed)}")


def _optimise(
    model: DetectorModel,
    classifier: ClassifierHead,
    dataset: ShapesDataset,
    config: TrainConfig,
    frozen: dict[str, bool],
    iterations: int,
    lr: float,
    stage: str,
    proposal_mode: str = "learned",
    log_path: Optional[Path] = None,
) -> tuple[list[dict], set]:
    model.set_frozen({k: v for k, v in frozen.items() if k in COMPONENTS})
    classifier.weight.requires_grad_(not frozen.get("classifier", False))
    frozen_names = [k for k in COMPONENTS if frozen.get(k)]
    before = model.snapshot(frozen_names)
    cls_before = classifier.weight.detach().clone() if frozen.get("classifier") else None

    params = [p for p in model.parameters() if p.requires_grad]
    if not frozen.get("classifier"):
        params.append(classifier.weight)
    if not params:
        raise TrainingError(f"{stage}: every component is frozen")
    opt = torch.optim.SGD(params, lr=lr, momentum=config.momentum, weight_decay=config.weight_decay)
    loader = BatchLoader(dataset, min(config.batch_size, len(dataset.manifest.images)), config.seed, config.flip)
    g = torch.Generator().manual_seed(config.seed + 1)
    model.train()
    history = []
    sink = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for it, batch in zip(range(iterations), loader):
            losses = compute_losses(batch, model, classifier, config, frozen, proposal_mode, g)
            total = losses.total
            if not torch.isfinite(total):
                raise TrainingError(f"{stage} iteration {it}: non-finite loss {losses.as_floats()}")
            opt.zero_grad(set_to_none=True)
            if total.requires_grad:
                total.backward()
                if config.grad_clip:
                    torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
                opt.step()
            rec = {"stage": stage, "iteration": it, "lr": lr, "seed": config.seed, **losses.as_floats()}
            rec["total"] = float(total.detach())
            history.append(rec)
            if sink:
                sink.write(json.dumps(rec) + "\n")
            if it % 100 == 0:
                log.info("%s it %d loss %.4f", stage, it, rec["total"])
    finally:
        if sink:
            sink.close()

    after = model.snapshot(frozen_names)
    for name, tensor in before.items():
        if not torch.equal(tensor, after[name]):
            raise FreezeViolation(f"{stage}: frozen parameter {name} changed")
    if cls_before is not None and not torch.equal(cls_before, classifier.weight.detach()):
        raise FreezeViolation(f"{stage}: frozen classifier changed")
    model.eval()
    return history, loader.served_class_ids


def train_stage1(dataset: ShapesDataset, base_ids: Sequence[int], config: TrainConfig,
                 log_path: Optional[Path] = None, proposal_mode: str = "learned") -> TrainResult:
    """Train every component jointly on base classes only."""
    _check_classes(dataset, base_ids, "stage 1")
    torch.manual_seed(config.seed)
    head_ids = list(base_ids) if config.model.box_mode == "specific" else []
    model = build_model(config.model, head_ids, seed=config.seed)
    reg = initial_registry(config.model.embedding_dim, list(base_ids), config.alpha, config.metric, config.seed)
    classifier = ClassifierHead(reg)
    history, served = _optimise(
        model, classifier, dataset, config, config.freeze_map(1), config.iterations_stage1,
        config.lr_stage1, "stage1", proposal_mode, log_path,
    )
    model.set_frozen({k: False for k in COMPONENTS})
    return TrainResult(model, classifier.to_registry(), history, served)


def train_one_stage(variant: str, dataset: ShapesDataset, base_ids: Sequence[int], config: TrainConfig,
                    log_path: Optional[Path] = None) -> TrainResult:
    """Single-stage baseline with a cosine or linear classifier; no fine-tuning."""
    name = {"cosine": "one_stage_cosine", "linear": "one_stage_linear"}.get(variant, variant)
    if name not in ("one_stage_cosine", "one_stage_linear"):
        raise ValueError(f"one-stage variant must be 'cosine' or 'linear', got {variant!r}")
    return train_stage1(dataset, base_ids, replace(config, variant=name), log_path)


def _copy_model(model: DetectorModel) -> DetectorModel:
    return DetectorModel.from_blocks(model.metadata(), model.blocks())


def finetune_imtfa_stage2(model: DetectorModel, registry: ClassRegistry, dataset: ShapesDataset,
                          base_ids: Sequence[int], config: TrainConfig,
                          log_path: Optional[Path] = None) -> TrainResult:
    """Fine-tune G, C and R on base classes with B, RPN (and M) frozen; G becomes the instance feature extractor."""
    _check_classes(dataset, base_ids, "iMTFA stage 2")
    if set(registry.foreground_ids) != set(base_ids):
        raise SplitViolation("iMTFA stage 2 expects a registry holding exactly the base classes")
    torch.manual_seed(config.seed + 2)
    model = _copy_model(model)
    classifier = ClassifierHead(registry)
    history, served = _optimise(
        model, classifier, dataset, config, config.freeze_map(2), config.iterations_stage2,
        config.lr_stage2, "imtfa_stage2", "learned", log_path,
    )
    return TrainResult(model, classifier.to_registry(), history, served)


def expand_registry_random(registry: ClassRegistry, new_ids: Sequence[int], seed: int) -> ClassRegistry:
    """Append trained-origin columns drawn from a unit Gaussian, scaled to the mean base-column norm."""
    from .imprint import TRAINED, append_column

    fg_cols = [i for i in range(registry.num_columns) if i != registry.background_index]
    norms = np.linalg.norm(registry.weights[:, fg_cols].astype(np.float64), axis=0)
    scale = float(norms.mean()) if len(norms) else 1.0
    g = torch.Generator().manual_seed(seed)
    for cid in new_ids:
        v = torch.randn(registry.embedding_dim, generator=g, dtype=torch.float64).numpy()
        registry = append_column(registry, cid, v / np.linalg.norm(v) * scale, TRAINED)
    return registry


def finetune_mtfa(model: DetectorModel, registry: ClassRegistry, dataset: ShapesDataset, split: ClassSplit,
                  config: TrainConfig, log_path: Optional[Path] = None) -> TrainResult:
    """Fine-tune C, R and M on a balanced K-shot base+novel set with B, RPN and G frozen."""
    _check_classes(dataset, split.all_ids, "MTFA stage 2")
    if VARIANTS[config.variant][2] != "mtfa":
        raise ValueError(f"variant {config.variant!r} is not an MTFA variant")
    torch.manual_seed(config.seed + 3)
    new_ids = [c for c in split.novel_ids if c not in registry.class_ids]
    model = _copy_model(model)
    model.expand_classes([c for c in new_ids if c not in model.box_head.class_ids],
                         torch.Generator().manual_seed(config.seed + 4))
    registry = expand_registry_random(registry, new_ids, config.seed + 5)
    classifier = ClassifierHead(registry)
    history, served = _optimise(
        model, classifier, dataset, config, config.freeze_map(2), config.iterations_stage2,
        config.lr_stage2, "mtfa_stage2", "learned", log_path,
    )
    return TrainResult(model, classifier.to_registry(), history, served)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: DetectorModel, registry: ClassRegistry, extra: Optional[dict] = None) -> None:
    from .container import write_container

    meta = {
        "model": model.metadata(),
        "registry": registry.metadata(),
        "embedding_dim": model.config.embedding_dim,
        "pooled_size": model.config.pooled_size,
        "mask_size": model.config.mask_size,
        "head_modes": {"box": model.config.box_mode, "mask": model.config.mask_mode},
        "alpha": registry.alpha,
    }
    if extra:
        meta["extra"] = extra
    blocks = {f"model.{k}": v for k, v in model.blocks().items()}
    blocks["classifier.W"] = registry.weights
    write_container(path, "checkpoint", meta, blocks)


def load_checkpoint(path) -> tuple[DetectorModel, ClassRegistry, dict]:
    from .container import read_container
    from .imprint import registry_from_meta

    meta, blocks = read_container(path, "checkpoint")
    model_blocks = {k[len("model."):]: v for k, v in blocks.items() if k.startswith("model.")}
    model = DetectorModel.from_blocks(meta["model"], model_blocks)
    model.eval()
    registry = registry_from_meta(meta["registry"], blocks["classifier.W"])
    return model, registry, meta
