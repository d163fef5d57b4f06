"""Episodic evaluation: inference, GTOE filtering, COCO-style AP and repeated-seed aggregation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np
import torch
from torchvision.ops import batched_nms

from .core import Box, Detection, InstanceAnnotation, box_iou_matrix, mask_iou_matrix
from .imprint import ClassRegistry, imprint_classes, registry_scores
from .model import ROI_BOX_WEIGHTS, DetectorModel, clip_boxes, decode_boxes, paste_mask
from .shapesdata import ShapesDataset, sample_shots

IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
RECALL_GRID = np.linspace(0.0, 1.0, 101)
GROUPS = ("overall", "base", "novel")
TASKS = ("detection", "segmentation")
METRICS = ("AP", "AP50")


@dataclass(frozen=True)
class EpisodeSpec:
    test_class_ids: tuple[int, ...]
    k: int = 1
    seed: int = 0
    gtoe: bool = False
    score_threshold: float = 0.05
    max_detections_per_image: int = 100
    nms_threshold: float = 0.5
    alpha: Optional[float] = None
    proposal_mode: str = "learned"
    oracle_jitter: float = 0.0
    gtoe_mode: str = "reresolve"

    def __post_init__(self):
        object.__setattr__(self, "test_class_ids", tuple(int(c) for c in self.test_class_ids))
        if self.k < 1:
            raise ValueError(f"K must be >= 1, got {self.k}")
        if self.gtoe_mode not in ("reresolve", "drop"):
            raise ValueError(f"unknown gtoe_mode {self.gtoe_mode!r}")
        if self.proposal_mode not in ("learned", "oracle"):
            raise ValueError(f"unknown proposal_mode {self.proposal_mode!r}")


# ---------------------------------------------------------------------------
# inference


def gtoe_filter(detections: Sequence[Detection], gt_class_ids: Iterable[int], class_ids: Sequence[int],
                mode: str = "reresolve") -> list[Detection]:
    """Zero the probabilities of classes absent from the image and re-pick labels.

    ``class_ids`` names the entries of each detection's ``probabilities``.
    Probabilities are not renormalised. In ``drop`` mode a detection whose
    label was removed is discarded instead of re-resolved.
    """
    present = set(gt_class_ids)
    keep_cols = np.array([c in present for c in class_ids], dtype=bool)
    out = []
    for det in detections:
        if det.probabilities is None:
            raise ValueError("gtoe_filter needs detections that retain their probabilities")
        probs = np.asarray(det.probabilities, dtype=np.float64) * keep_cols
        if mode == "drop" and det.class_id not in present:
            continue
        if not probs.any():
            continue
        j = int(np.argmax(probs))
        out.append(replace(det, class_id=int(class_ids[j]), score=float(probs[j]), probabilities=tuple(probs)))
    return out


@torch.no_grad()
def run_inference(model: DetectorModel, registry: ClassRegistry, image: np.ndarray, spec: EpisodeSpec,
                  gt: Optional[Sequence[InstanceAnnotation]] = None) -> list[Detection]:
    """Detections for one ``HxWx3`` image; ``gt`` feeds GTOE filtering and oracle proposals."""
    model.eval()
    h, w = image.shape[:2]
    feature = model.backbone_forward(image)
    if spec.proposal_mode == "oracle":
        if gt is None:
            raise ValueError("oracle proposals need ground truth")
        proposals = model.oracle_proposals([a for a in gt if not a.ignore], h, w, spec.oracle_jitter, spec.seed).boxes
    else:
        proposals = model.learned_proposals(feature, h, w, training=False)[0].boxes
    if len(proposals) == 0:
        return []
    z = model.embed(model.pool(feature, proposals))
    probs = torch.softmax(registry_scores(z, registry), dim=1)
    fg_cols = [j for j in range(registry.num_columns) if j != registry.background_index]
    fg_ids = [registry.class_ids[j] for j in fg_cols]
    fg_probs = probs[:, fg_cols].double().numpy()

    candidates = []
    for i in range(len(proposals)):
        j = int(np.argmax(fg_probs[i]))
        candidates.append(
            Detection(fg_ids[j], float(fg_probs[i, j]), Box.from_seq(proposals[i].tolist()),
                      probabilities=tuple(fg_probs[i]))
        )
    if spec.gtoe:
        filtered = []
        for i, det in enumerate(candidates):
            res = gtoe_filter([det], [a.class_id for a in (gt or ()) if not a.ignore], fg_ids, spec.gtoe_mode)
            if res:
                filtered.append((i, res[0]))
        pairs = filtered
    else:
        pairs = list(enumerate(candidates))
    pairs = [(i, d) for i, d in pairs if d.score >= spec.score_threshold]
    if not pairs:
        return []

    rows = torch.tensor([i for i, _ in pairs], dtype=torch.long)
    labels = [d.class_id for _, d in pairs]
    if model.config.box_mode == "specific":
        deltas = model.box_deltas(z[rows], labels)
    else:
        deltas = model.box_deltas(z[rows])
    boxes = clip_boxes(decode_boxes(deltas, proposals[rows], ROI_BOX_WEIGHTS), h, w)
    scores = torch.tensor([d.score for _, d in pairs], dtype=torch.float64)
    valid = ((boxes[:, 2] - boxes[:, 0]) > 0) & ((boxes[:, 3] - boxes[:, 1]) > 0)
    idx = torch.nonzero(valid).flatten()
    keep = idx[batched_nms(boxes[idx].double(), scores[idx], torch.tensor(labels)[idx], spec.nms_threshold)]
    keep = keep[: spec.max_detections_per_image]
    if len(keep) == 0:
        return []

    final_boxes = boxes[keep]
    final_labels = [labels[int(k)] for k in keep]
    pooled = model.pool(feature, final_boxes)
    if model.config.mask_mode == "specific":
        logits = model.mask_logits(pooled, final_labels)
    else:
        logits = model.mask_logits(pooled)
    out = []
    for n, k in enumerate(keep):
        det = pairs[int(k)][1]
        box = Box.from_seq(final_boxes[n].tolist())
        mask = paste_mask(logits[n], box, h, w)
        if mask.area == 0:
            continue
        out.append(replace(det, box=box, mask=mask))
    return out


# ---------------------------------------------------------------------------
# matching and AP


def greedy_match(iou: np.ndarray, threshold: float) -> list[bool]:
    """COCO greedy matching. ``iou`` is detections (score-sorted) x ground truths."""
    matched = np.zeros(iou.shape[1], dtype=bool)
    flags = []
    for d in range(iou.shape[0]):
        best, best_iou = -1, min(threshold, 1 - 1e-10)
        for g in range(iou.shape[1]):
            if matched[g] or iou[d, g] < best_iou:
                continue
            best, best_iou = g, iou[d, g]
        if best >= 0:
            matched[best] = True
        flags.append(best >= 0)
    return flags


def _sort_detections(detections: Sequence[Detection]) -> list[Detection]:
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    return [detections[i] for i in order]


def match_and_score(detections: Sequence[Detection], annotations: Sequence[InstanceAnnotation],
                    iou_kind: str = "box", iou_threshold: float = 0.5) -> tuple[list[bool], int]:
    """TP/FP flags (in score order) for detections of a single class on a single image, and the GT count."""
    dets = _sort_detections(detections)
    gts = [a for a in annotations if not a.ignore]
    return greedy_match(_iou(dets, gts, iou_kind), iou_threshold), len(gts)


def _iou(dets: Sequence[Detection], gts: Sequence[InstanceAnnotation], kind: str) -> np.ndarray:
    if not dets or not gts:
        return np.zeros((len(dets), len(gts)))
    if kind == "box":
        return box_iou_matrix(np.array([d.box.as_list() for d in dets]), np.array([g.box.as_list() for g in gts]))
    if kind == "mask":
        if any(d.mask is None for d in dets):
            raise ValueError("mask IoU needs detections that carry masks")
        return mask_iou_matrix([d.mask for d in dets], [g.mask for g in gts])
    raise ValueError(f"unknown iou kind {kind!r}")


def average_precision(tp_flags: Sequence[bool], num_gt: int) -> Optional[float]:
    """COCO 101-point interpolated AP; ``None`` when there is no ground truth."""
    if num_gt == 0:
        return None
    tp = np.asarray(tp_flags, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    tps = np.cumsum(tp)
    recall = tps / num_gt
    precision = tps / np.arange(1, len(tp) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def evaluate_detections(
    predictions: Mapping[int, Sequence[Detection]],
    ground_truth: Mapping[int, Sequence[InstanceAnnotation]],
    class_ids: Sequence[int],
    max_detections: int = 100,
) -> dict:
    """Per-class AP / AP50 for boxes and masks over a set of images.

    Returns ``{"per_class": {task: {class_id: {"AP": .., "AP50": ..}}}, "excluded": [...]}``;
    classes without ground truth are excluded from the tables and listed.
    """
    per_class = {task: {} for task in TASKS}
    excluded = []
    image_ids = sorted(ground_truth)
    for cid in class_ids:
        num_gt = 0
        # per image: score-sorted detections plus IoU matrices for both tasks
        per_image = []
        for image_id in image_ids:
            gts = [a for a in ground_truth[image_id] if a.class_id == cid and not a.ignore]
            dets = _sort_detections([d for d in _sort_detections(predictions.get(image_id, ()))[:max_detections]
                                     if d.class_id == cid])
            num_gt += len(gts)
            if dets or gts:
                per_image.append((dets, _iou(dets, gts, "box"), _iou(dets, gts, "mask") if dets and gts else
                                  np.zeros((len(dets), len(gts)))))
        if num_gt == 0:
            excluded.append(cid)
            continue
        for task, which in (("detection", 1), ("segmentation", 2)):
            aps = []
            for t in IOU_THRESHOLDS:
                scores, flags = [], []
                for entry in per_image:
                    dets, iou = entry[0], entry[which]
                    flags.extend(greedy_match(iou, t))
                    scores.extend(d.score for d in dets)
                order = np.argsort(-np.asarray(scores), kind="mergesort")
                aps.append(average_precision([flags[i] for i in order], num_gt))
            per_class[task][cid] = {"AP": float(np.mean(aps)), "AP50": float(aps[0])}
    return {"per_class": per_class, "excluded": excluded}


def group_metrics(per_class: Mapping, groups: Mapping[str, Sequence[int]]) -> dict:
    out = {}
    for group, ids in groups.items():
        out[group] = {}
        for task in TASKS:
            table = per_class[task]
            vals = [table[c] for c in ids if c in table]
            out[group][task] = {
                m: (float(np.mean([v[m] for v in vals])) if vals else float("nan")) for m in METRICS
            }
    return out


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    mean: dict
    std: dict
    per_seed: list[dict]
    per_class: dict
    spec: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def metric(self, group: str, task: str, metric: str = "AP50") -> float:
        return self.mean[group][task][metric]

    def seed_values(self, group: str, task: str, metric: str = "AP50") -> list[float]:
        return [r["groups"][group][task][metric] for r in self.per_seed]

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "std": self.std,
            "per_class": self.per_class,
            "per_seed": self.per_seed,
            "spec": self.spec,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        def fix(table):
            return {task: {int(k): v for k, v in t.items()} for task, t in table.items()}

        per_seed = [dict(r, per_class=fix(r["per_class"])) if "per_class" in r else r for r in d["per_seed"]]
        return cls(d["mean"], d["std"], per_seed, fix(d["per_class"]), d.get("spec", {}), d.get("provenance", {}))

    def format_table(self, title: str = "") -> str:
        head = f"{'':>10} | " + " | ".join(f"{t:^35}" for t in ("Detection", "Segmentation"))
        sub = f"{'':>10} | " + " | ".join(" ".join(f"{g.capitalize():^11}" for g in GROUPS) for _ in TASKS)
        sub2 = f"{'':>10} | " + " | ".join(" ".join(f"{'AP':>5} {'AP50':>5}" for _ in GROUPS) for _ in TASKS)
        row = f"{'mean':>10} | " + " | ".join(
            " ".join(f"{100 * self.mean[g][t]['AP']:5.1f} {100 * self.mean[g][t]['AP50']:5.1f}" for g in GROUPS)
            for t in TASKS
        )
        srow = f"{'std':>10} | " + " | ".join(
            " ".join(f"{100 * self.std[g][t]['AP']:5.1f} {100 * self.std[g][t]['AP50']:5.1f}" for g in GROUPS)
            for t in TASKS
        )
        lines = [title] if title else []
        return "\n".join(lines + [head, sub, sub2, row, srow])


def aggregate(per_seed: Sequence[dict]) -> tuple[dict, dict, dict]:
    mean, std = {}, {}
    for g in GROUPS:
        mean[g], std[g] = {}, {}
        for t in TASKS:
            mean[g][t], std[g][t] = {}, {}
            for m in METRICS:
                vals = np.array([r["groups"][g][t][m] for r in per_seed], dtype=np.float64)
                if np.isnan(vals).all():
                    mean[g][t][m] = std[g][t][m] = float("nan")
                else:
                    mean[g][t][m] = float(np.mean(vals))
                    std[g][t][m] = float(np.std(vals))
    per_class = {}
    for t in TASKS:
        ids = sorted({c for r in per_seed for c in r["per_class"][t]})
        per_class[t] = {
            c: {m: float(np.mean([r["per_class"][t][c][m] for r in per_seed if c in r["per_class"][t]]))
                for m in METRICS}
            for c in ids
        }
    return mean, std, per_class


def evaluate_model(model: DetectorModel, registry: ClassRegistry, test: ShapesDataset, spec: EpisodeSpec,
                   base_ids: Sequence[int] = (), novel_ids: Sequence[int] = ()) -> dict:
    """One evaluation pass over ``test`` with an already-populated registry."""
    reg = registry.restrict(spec.test_class_ids)
    if spec.alpha is not None:
        reg = reg.with_alpha(spec.alpha)
    gt = test.manifest.by_image()
    preds = {
        image_id: run_inference(model, reg, test.image(image_id), spec, gt[image_id])
        for image_id in sorted(gt)
    }
    evaluation = evaluate_detections(preds, gt, spec.test_class_ids, spec.max_detections_per_image)
    groups = {
        "overall": list(spec.test_class_ids),
        "base": [c for c in spec.test_class_ids if c in set(base_ids)],
        "novel": [c for c in spec.test_class_ids if c in set(novel_ids)],
    }
    return {
        "groups": group_metrics(evaluation["per_class"], groups),
        "per_class": evaluation["per_class"],
        "excluded": evaluation["excluded"],
        "predictions": preds,
    }


Adapter = Callable[[int, EpisodeSpec], tuple[DetectorModel, ClassRegistry]]


def imprint_adapter(model: DetectorModel, base_registry: ClassRegistry, support: ShapesDataset,
                    novel_ids: Sequence[int]) -> Adapter:
    """Per-episode adaptation by weight imprinting K sampled shots per novel class."""

    def adapt(seed: int, spec: EpisodeSpec):
        shots = sample_shots(support.manifest, novel_ids, spec.k, seed)
        return model, imprint_classes(base_registry, shots, model, support.images)

    return adapt


def run_episodes(
    model: DetectorModel,
    base_registry: ClassRegistry,
    support: ShapesDataset,
    test: ShapesDataset,
    template: EpisodeSpec,
    num_repeats: int,
    base_ids: Sequence[int],
    novel_ids: Sequence[int],
    adapter: Optional[Adapter] = None,
    on_seed: Optional[Callable[[dict], None]] = None,
) -> EvalReport:
    """Repeat sample-adapt-evaluate with seeds ``template.seed + r``; report mean and std."""
    if num_repeats < 1:
        raise ValueError("num_repeats must be >= 1")
    adapter = adapter or imprint_adapter(model, base_registry, support, novel_ids)
    per_seed = []
    for r in range(num_repeats):
        seed = template.seed + r
        spec = replace(template, seed=seed)
        ep_model, registry = adapter(seed, spec)
        missing = set(spec.test_class_ids) - set(registry.foreground_ids)
        if missing:
            raise ValueError(f"registry lacks test classes {sorted(missing)} after adaptation")
        result = evaluate_model(ep_model, registry, test, spec, base_ids, novel_ids)
        record = {"seed": seed, "k": spec.k, "groups": result["groups"], "per_class": result["per_class"],
                  "excluded": result["excluded"]}
        per_seed.append(record)
        if on_seed:
            on_seed(record)
    mean, std, per_class = aggregate(per_seed)
    spec_dict = {k: (list(v) if isinstance(v, tuple) else v) for k, v in template.__dict__.items()}
    return EvalReport(mean, std, per_seed, per_class, spec_dict)


def report_to_json(report: EvalReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))
