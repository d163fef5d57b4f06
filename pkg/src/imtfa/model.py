"""Miniature two-stage detector: backbone, RPN, RoI pooling, RoI feature extractor, box and mask heads."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import nms

from .core import BinaryMask, Box, InstanceAnnotation

COMPONENTS = ("backbone", "rpn", "roi_extractor", "box_head", "mask_head")
BBOX_CLAMP = math.log(1000.0 / 16)
ROI_BOX_WEIGHTS = (10.0, 10.0, 5.0, 5.0)


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    stride: int = 8
    channels: tuple[int, ...] = (32, 64, 64, 64)
    pooled_size: int = 7
    mask_size: int = 14
    embedding_dim: int = 128
    hidden_dim: int = 256
    anchor_size: float = 20.0
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    rpn_pre_nms: int = 256
    rpn_post_nms: int = 64
    rpn_nms_train: float = 0.7
    rpn_nms_test: float = 0.5
    box_mode: str = "agnostic"
    mask_mode: str = "agnostic"

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.anchor_ratios = tuple(self.anchor_ratios)
        for mode in (self.box_mode, self.mask_mode):
            if mode not in ("agnostic", "specific"):
                raise ModelError(f"head mode must be 'agnostic' or 'specific', got {mode!r}")
        if len(self.channels) != 4:
            raise ModelError("backbone has exactly four blocks")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["anchor_ratios"] = list(self.anchor_ratios)
        return d


# ---------------------------------------------------------------------------
# box coding


def encode_boxes(gt: torch.Tensor, proposals: torch.Tensor, weights=(1.0, 1.0, 1.0, 1.0)) -> torch.Tensor:
    """Deltas ``(dx, dy, dw, dh)`` taking ``proposals`` to ``gt``."""
    wx, wy, ww, wh = weights
    pw = proposals[:, 2] - proposals[:, 0]
    ph = proposals[:, 3] - proposals[:, 1]
    px = proposals[:, 0] + 0.5 * pw
    py = proposals[:, 1] + 0.5 * ph
    gw = gt[:, 2] - gt[:, 0]
    gh = gt[:, 3] - gt[:, 1]
    gx = gt[:, 0] + 0.5 * gw
    gy = gt[:, 1] + 0.5 * gh
    return torch.stack(
        [wx * (gx - px) / pw, wy * (gy - py) / ph, ww * torch.log(gw / pw), wh * torch.log(gh / ph)], dim=1
    )


def decode_boxes(deltas: torch.Tensor, proposals: torch.Tensor, weights=(1.0, 1.0, 1.0, 1.0)) -> torch.Tensor:
    wx, wy, ww, wh = weights
    pw = proposals[:, 2] - proposals[:, 0]
    ph = proposals[:, 3] - proposals[:, 1]
    px = proposals[:, 0] + 0.5 * pw
    py = proposals[:, 1] + 0.5 * ph
    dx = deltas[:, 0] / wx
    dy = deltas[:, 1] / wy
    dw = torch.clamp(deltas[:, 2] / ww, max=BBOX_CLAMP)
    dh = torch.clamp(deltas[:, 3] / wh, max=BBOX_CLAMP)
    cx = px + dx * pw
    cy = py + dy * ph
    w = pw * torch.exp(dw)
    h = ph * torch.exp(dh)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


def clip_boxes(boxes: torch.Tensor, height: int, width: int) -> torch.Tensor:
    x = boxes[:, 0::2].clamp(0, width)
    y = boxes[:, 1::2].clamp(0, height)
    return torch.stack([x[:, 0], y[:, 0], x[:, 1], y[:, 1]], dim=1)


def boxes_to_tensor(boxes: Sequence[Box]) -> torch.Tensor:
    if not boxes:
        return torch.zeros((0, 4))
    return torch.tensor([b.as_list() for b in boxes], dtype=torch.float32)


def box_iou_tensor(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    iw = torch.minimum(a[:, None, 2], b[None, :, 2]) - torch.maximum(a[:, None, 0], b[None, :, 0])
    ih = torch.minimum(a[:, None, 3], b[None, :, 3]) - torch.maximum(a[:, None, 1], b[None, :, 1])
    inter = iw.clamp(min=0) * ih.clamp(min=0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))


# ---------------------------------------------------------------------------
# pooling and mask pasting


def roi_pool(feature: torch.Tensor, boxes: torch.Tensor, output_size: int, stride: float,
             batch_index: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Bilinear crop-and-resize of image-space ``boxes`` from ``feature``.

    ``feature`` is ``(C, H, W)`` or ``(N, C, H, W)``; the result is
    ``(R, C, output_size, output_size)``. Samples sit at bin centres, and
    feature cell ``j`` is centred at image coordinate ``(j + 0.5) * stride``.
    """
    if feature.dim() == 3:
        feature = feature.unsqueeze(0)
    boxes = boxes.reshape(-1, 4).to(feature.dtype)
    n_rois = boxes.shape[0]
    if n_rois == 0:
        return feature.new_zeros((0, feature.shape[1], output_size, output_size))
    widths = boxes[:, 2] - boxes[:, 0]
    heights = boxes[:, 3] - boxes[:, 1]
    if bool(((widths <= 0) | (heights <= 0)).any()):
        raise ModelError("roi_pool received a zero-area box")
    if batch_index is None:
        batch_index = torch.zeros(n_rois, dtype=torch.long)
    _, _, fh, fw = feature.shape
    steps = (torch.arange(output_size, dtype=feature.dtype) + 0.5) / output_size
    xs = boxes[:, 0:1] + steps[None, :] * widths[:, None]
    ys = boxes[:, 1:2] + steps[None, :] * heights[:, None]
    # grid_sample with align_corners=False puts cell j's centre at (2j + 1) / size - 1
    gx = 2.0 * (xs / stride) / fw - 1.0
    gy = 2.0 * (ys / stride) / fh - 1.0
    grid = torch.stack(
        [gx[:, None, :].expand(-1, output_size, -1), gy[:, :, None].expand(-1, -1, output_size)], dim=-1
    )
    return F.grid_sample(feature[batch_index], grid, mode="bilinear", padding_mode="border", align_corners=False)


def paste_mask(logits, box: Box, image_h: int, image_w: int, threshold: float = 0.5) -> BinaryMask:
    """Resize ``sigmoid(logits)`` into ``box`` and binarise; pixels outside the box are zero."""
    logits = torch.as_tensor(logits, dtype=torch.float32)
    q = logits.shape[-1]
    probs = torch.sigmoid(logits.reshape(1, 1, q, q))
    x1, y1, x2, y2 = box.as_list()
    out = np.zeros((image_h, image_w), dtype=bool)
    if x2 <= x1 or y2 <= y1:
        return BinaryMask(out)
    c0 = max(int(math.floor(x1)), 0)
    c1 = min(int(math.ceil(x2)), image_w)
    r0 = max(int(math.floor(y1)), 0)
    r1 = min(int(math.ceil(y2)), image_h)
    if c1 <= c0 or r1 <= r0:
        return BinaryMask(out)
    cx = torch.arange(c0, c1, dtype=torch.float32) + 0.5
    cy = torch.arange(r0, r1, dtype=torch.float32) + 0.5
    inside_x = (cx >= x1) & (cx < x2)
    inside_y = (cy >= y1) & (cy < y2)
    gx = 2.0 * (cx - x1) / (x2 - x1) - 1.0
    gy = 2.0 * (cy - y1) / (y2 - y1) - 1.0
    grid = torch.stack([gx[None, :].expand(len(cy), -1), gy[:, None].expand(-1, len(cx))], dim=-1)
    sampled = F.grid_sample(probs, grid[None], mode="bilinear", padding_mode="border", align_corners=False)[0, 0]
    keep = (sampled >= threshold) & inside_y[:, None] & inside_x[None, :]
    out[r0:r1, c0:c1] = keep.numpy()
    return BinaryMask(out)


# ---------------------------------------------------------------------------
# network components


def _block(cin, cout, stride):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.GroupNorm(8, cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.GroupNorm(8, cout),
        nn.ReLU(inplace=True),
    )


class Backbone(nn.Module):
    """Four conv blocks; three stride-2 blocks give an overall stride of 8."""

    def __init__(self, channels=(32, 64, 64, 64)):
        super().__init__()
        strides = (2, 2, 2, 1)
        cins = (3,) + tuple(channels[:-1])
        self.blocks = nn.Sequential(*[_block(ci, co, s) for ci, co, s in zip(cins, channels, strides)])
        self.stride = 8
        self.out_channels = channels[-1]

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() == 3:
            images = images.unsqueeze(0)
        h, w = images.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ModelError(f"image size {h}x{w} is not divisible by stride {self.stride}")
        return self.blocks(images)


class RPNHead(nn.Module):
    def __init__(self, channels: int, num_anchors: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.objectness = nn.Conv2d(channels, num_anchors, 1)
        self.deltas = nn.Conv2d(channels, 4 * num_anchors, 1)
        for layer in (self.conv, self.objectness, self.deltas):
            nn.init.normal_(layer.weight, std=0.01)
            nn.init.zeros_(layer.bias)

    def forward(self, feature):
        t = F.relu(self.conv(feature))
        n, _, h, w = t.shape
        logits = self.objectness(t).permute(0, 2, 3, 1).reshape(n, -1)
        deltas = self.deltas(t).reshape(n, -1, 4, h, w).permute(0, 3, 4, 1, 2).reshape(n, -1, 4)
        return logits, deltas


class RoIFeatureExtractor(nn.Module):
    """Two fully connected layers mapping a pooled RoI to an embedding."""

    def __init__(self, in_features: int, hidden: int, embedding_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(in_features, hidden)
        self.fc2 = nn.Linear(hidden, embedding_dim)

    def forward(self, roi: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(roi.flatten(1))))


class BoxHead(nn.Module):
    def __init__(self, embedding_dim: int, mode: str, class_ids: Sequence[int] = ()):
        super().__init__()
        self.mode = mode
        self.class_ids = list(class_ids) if mode == "specific" else []
        outputs = 4 if mode == "agnostic" else 4 * max(len(self.class_ids), 1)
        self.fc = nn.Linear(embedding_dim, outputs)
        nn.init.normal_(self.fc.weight, std=0.001)
        nn.init.zeros_(self.fc.bias)

    def _column(self, class_id) -> int:
        if class_id is None:
            raise ModelError("class-specific box head needs a class_id")
        if class_id not in self.class_ids:
            raise ModelError(f"class_id {class_id} out of range for box head {self.class_ids}")
        return self.class_ids.index(class_id)

    def forward(self, z: torch.Tensor, class_ids=None) -> torch.Tensor:
        out = self.fc(z)
        if self.mode == "agnostic":
            return out
        if class_ids is None:
            raise ModelError("class-specific box head needs class ids")
        if isinstance(class_ids, int):
            class_ids = [class_ids] * z.shape[0]
        cols = torch.tensor([self._column(int(c)) for c in class_ids], dtype=torch.long)
        out = out.reshape(z.shape[0], -1, 4)
        return out[torch.arange(z.shape[0]), cols]

    def expand(self, new_ids: Sequence[int], generator: Optional[torch.Generator] = None) -> None:
        if self.mode == "agnostic" or not new_ids:
            return
        old = self.fc
        fresh = nn.Linear(old.in_features, old.out_features + 4 * len(new_ids))
        with torch.no_grad():
            fresh.weight.normal_(0.0, 0.001, generator=generator)
            fresh.bias.zero_()
            fresh.weight[: old.out_features] = old.weight
            fresh.bias[: old.out_features] = old.bias
        self.fc = fresh
        self.class_ids += list(new_ids)


class MaskHead(nn.Module):
    """Conv stack plus one 2x deconvolution: ``P x P`` RoI features to ``2P x 2P`` logits."""

    def __init__(self, channels: int, mode: str, class_ids: Sequence[int] = ()):
        super().__init__()
        self.mode = mode
        self.class_ids = list(class_ids) if mode == "specific" else []
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.deconv = nn.ConvTranspose2d(channels, channels, 2, stride=2)
        self.predictor = nn.Conv2d(channels, 1 if mode == "agnostic" else max(len(self.class_ids), 1), 1)

    def _column(self, class_id) -> int:
        if class_id is None:
            raise ModelError("class-specific mask head needs a class_id")
        if class_id not in self.class_ids:
            raise ModelError(f"class_id {class_id} out of range for mask head {self.class_ids}")
        return self.class_ids.index(class_id)

    def forward(self, roi: torch.Tensor, class_ids=None) -> torch.Tensor:
        t = F.relu(self.conv1(roi))
        t = F.relu(self.conv2(t))
        t = F.relu(self.deconv(t))
        out = self.predictor(t)
        if self.mode == "agnostic":
            return out[:, 0]
        if class_ids is None:
            raise ModelError("class-specific mask head needs class ids")
        if isinstance(class_ids, int):
            class_ids = [class_ids] * roi.shape[0]
        cols = torch.tensor([self._column(int(c)) for c in class_ids], dtype=torch.long)
        return out[torch.arange(roi.shape[0]), cols]

    def expand(self, new_ids: Sequence[int], generator: Optional[torch.Generator] = None) -> None:
        if self.mode == "agnostic" or not new_ids:
            return
        old = self.predictor
        fresh = nn.Conv2d(old.in_channels, old.out_channels + len(new_ids), 1)
        with torch.no_grad():
            bound = 1.0 / math.sqrt(old.in_channels)
            fresh.weight.uniform_(-bound, bound, generator=generator)
            fresh.bias.zero_()
            fresh.weight[: old.out_channels] = old.weight
            fresh.bias[: old.out_channels] = old.bias
        self.predictor = fresh
        self.class_ids += list(new_ids)


@dataclass
class Proposals:
    boxes: torch.Tensor
    objectness: torch.Tensor


class DetectorModel(nn.Module):
    """Backbone B, RPN, RoI feature extractor G, box head R and mask head M.

    The classifier C is not part of this module: it lives in a
    :class:`~imtfa.imprint.ClassRegistry` so classes can be added without
    touching network parameters.
    """

    def __init__(self, config: Optional[ModelConfig] = None, class_ids: Sequence[int] = ()):
        super().__init__()
        self.config = config or ModelConfig()
        cfg = self.config
        self.backbone = Backbone(cfg.channels)
        self.rpn = RPNHead(cfg.channels[-1], len(cfg.anchor_ratios))
        self.roi_extractor = RoIFeatureExtractor(cfg.channels[-1] * cfg.pooled_size**2, cfg.hidden_dim, cfg.embedding_dim)
        self.box_head = BoxHead(cfg.embedding_dim, cfg.box_mode, class_ids)
        self.mask_head = MaskHead(cfg.channels[-1], cfg.mask_mode, class_ids)
        self.frozen: dict[str, bool] = {name: False for name in COMPONENTS}
        self._anchor_cache: dict = {}

    # -- freezing -----------------------------------------------------------

    def component(self, name: str) -> nn.Module:
        if name not in COMPONENTS:
            raise ModelError(f"unknown component {name!r}")
        return getattr(self, name)

    def set_frozen(self, frozen: dict[str, bool]) -> None:
        for name, flag in frozen.items():
            self.frozen[name] = bool(flag)
            for p in self.component(name).parameters():
                p.requires_grad_(not flag)

    def snapshot(self, names: Sequence[str]) -> dict[str, torch.Tensor]:
        return {
            f"{name}.{pname}": p.detach().clone()
            for name in names
            for pname, p in self.component(name).named_parameters()
        }

    # -- forward pieces -----------------------------------------------------

    @staticmethod
    def normalize(images) -> torch.Tensor:
        """uint8 ``HxWx3`` (or a batch of them) to float ``NxCxHxW`` in [-0.5, 0.5]."""
        arr = torch.from_numpy(np.array(images, dtype=np.float32))
        if arr.dim() == 3:
            arr = arr.unsqueeze(0)
        return arr.permute(0, 3, 1, 2) / 255.0 - 0.5

    def backbone_forward(self, images) -> torch.Tensor:
        if not isinstance(images, torch.Tensor) or images.dtype == torch.uint8:
            images = self.normalize(images)
        return self.backbone(images)

    def anchors(self, fh: int, fw: int) -> torch.Tensor:
        key = (fh, fw)
        if key not in self._anchor_cache:
            s = self.config.stride
            size = self.config.anchor_size
            shapes = torch.tensor(
                [[size / math.sqrt(r), size * math.sqrt(r)] for r in self.config.anchor_ratios], dtype=torch.float32
            )
            ys, xs = torch.meshgrid(
                (torch.arange(fh, dtype=torch.float32) + 0.5) * s,
                (torch.arange(fw, dtype=torch.float32) + 0.5) * s,
                indexing="ij",
            )
            centers = torch.stack([xs, ys], dim=-1).reshape(-1, 1, 2)
            half = shapes[None] / 2
            self._anchor_cache[key] = torch.cat([centers - half, centers + half], dim=-1).reshape(-1, 4)
        return self._anchor_cache[key]

    def rpn_forward(self, feature):
        return self.rpn(feature)

    def learned_proposals(self, feature, image_h, image_w, training=False, rpn_out=None) -> list[Proposals]:
        cfg = self.config
        logits, deltas = rpn_out if rpn_out is not None else self.rpn(feature)
        anchors = self.anchors(feature.shape[-2], feature.shape[-1])
        thresh = cfg.rpn_nms_train if training else cfg.rpn_nms_test
        out = []
        for i in range(feature.shape[0]):
            scores = logits[i].detach()
            boxes = clip_boxes(decode_boxes(deltas[i].detach(), anchors), image_h, image_w)
            ok = ((boxes[:, 2] - boxes[:, 0]) >= 1.0) & ((boxes[:, 3] - boxes[:, 1]) >= 1.0)
            boxes, scores = boxes[ok], scores[ok]
            order = torch.argsort(scores, descending=True, stable=True)[: cfg.rpn_pre_nms]
            boxes, scores = boxes[order], scores[order]
            keep = nms(boxes, scores, thresh)[: cfg.rpn_post_nms]
            out.append(Proposals(boxes[keep], torch.sigmoid(scores[keep])))
        return out

    def oracle_proposals(self, gt: Sequence[InstanceAnnotation], image_h, image_w, jitter=0.0, seed=0) -> Proposals:
        boxes = boxes_to_tensor([a.box for a in gt])
        if jitter > 0 and len(gt):
            g = torch.Generator().manual_seed(int(seed))
            wh = torch.stack([boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1]] * 2, dim=1)
            boxes = boxes + jitter * wh * torch.randn(boxes.shape, generator=g)
            boxes = clip_boxes(boxes, image_h, image_w)
            lo = boxes[:, :2]
            hi = torch.maximum(boxes[:, 2:], lo + 1.0)
            boxes = torch.cat([lo, hi], dim=1)
        return Proposals(boxes, torch.ones(len(gt)))

    def propose(self, feature, mode: str = "learned", gt: Optional[Sequence[InstanceAnnotation]] = None,
                image_size: Optional[tuple[int, int]] = None, training: bool = False,
                jitter: float = 0.0, seed: int = 0) -> list[Proposals]:
        """Per-image proposals: the learned RPN, or jittered ground-truth boxes in ``oracle`` mode."""
        s = self.config.stride
        h, w = image_size or (feature.shape[-2] * s, feature.shape[-1] * s)
        if mode == "learned":
            return self.learned_proposals(feature, h, w, training)
        if mode == "oracle":
            if gt is None:
                raise ModelError("oracle proposals need ground-truth annotations")
            return [self.oracle_proposals(gt, h, w, jitter, seed)]
        raise ModelError(f"unknown proposal mode {mode!r}")

    def pool(self, feature, boxes, batch_index=None, size=None) -> torch.Tensor:
        return roi_pool(feature, boxes, size or self.config.pooled_size, self.config.stride, batch_index)

    def embed(self, roi: torch.Tensor) -> torch.Tensor:
        return self.roi_extractor(roi)

    def box_deltas(self, z, class_ids=None) -> torch.Tensor:
        return self.box_head(z, class_ids)

    def mask_logits(self, roi, class_ids=None) -> torch.Tensor:
        return self.mask_head(roi, class_ids)

    # -- bookkeeping ----------------------------------------------------------

    def expand_classes(self, new_ids: Sequence[int], generator=None) -> None:
        self.box_head.expand(new_ids, generator)
        self.mask_head.expand(new_ids, generator)

    def metadata(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "box_class_ids": list(self.box_head.class_ids),
            "mask_class_ids": list(self.mask_head.class_ids),
            "frozen": dict(self.frozen),
        }

    def blocks(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}

    @classmethod
    def from_blocks(cls, meta: dict, blocks: dict[str, np.ndarray]) -> "DetectorModel":
        cfg = ModelConfig(**meta["config"])
        model = cls(cfg)
        model.box_head = BoxHead(cfg.embedding_dim, cfg.box_mode, meta.get("box_class_ids", ()))
        model.mask_head = MaskHead(cfg.channels[-1], cfg.mask_mode, meta.get("mask_class_ids", ()))
        state = model.state_dict()
        missing = set(state) - set(blocks)
        if missing:
            raise ModelError(f"checkpoint lacks parameter blocks {sorted(missing)}")
        for name, tensor in state.items():
            if tuple(tensor.shape) != tuple(blocks[name].shape):
                raise ModelError(f"block {name}: shape {blocks[name].shape} != expected {tuple(tensor.shape)}")
        model.load_state_dict({k: torch.from_numpy(np.asarray(blocks[k], dtype=np.float32)) for k in state})
        model.set_frozen(meta.get("frozen", {}))
        return model


def build_model(config: Optional[ModelConfig] = None, class_ids: Sequence[int] = (), seed: int = 0) -> DetectorModel:
    torch.manual_seed(seed)
    return DetectorModel(config, class_ids)
