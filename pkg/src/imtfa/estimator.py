"""Estimator-style facade: ``fit`` on base classes, ``imprint`` novel ones, ``predict`` and ``score``."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .core import Detection
from .evaluate import EpisodeSpec, evaluate_model, run_inference
from .imprint import ALPHA_ALL_CLASSES, ClassRegistry, imprint_classes
from .shapesdata import ClassSplit, ShapesDataset, build_balanced_finetune_set, restrict_to_classes, sample_shots
from .train import VARIANTS, TrainConfig, finetune_imtfa_stage2, finetune_mtfa, train_stage1


def check_dataset(X) -> ShapesDataset:
    if not isinstance(X, ShapesDataset):
        raise TypeError(f"expected a ShapesDataset, got {type(X).__name__}")
    if not X.manifest.images:
        raise ValueError("dataset has no images")
    return X


def check_image(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {arr.dtype}")
    return arr


def check_split(split) -> ClassSplit:
    if not isinstance(split, ClassSplit):
        raise TypeError(f"expected a ClassSplit, got {type(split).__name__}")
    return split


def check_class_ids(class_ids, known: Sequence[int]) -> tuple[int, ...]:
    ids = tuple(int(c) for c in class_ids)
    if not ids:
        raise ValueError("class id list is empty")
    unknown = sorted(set(ids) - set(known))
    if unknown:
        raise ValueError(f"classes {unknown} are not registered")
    return ids


class IMTFADetector(BaseEstimator):
    """Few-shot instance segmenter.

    ``fit`` trains on the base classes of ``split``. For the iMTFA variant
    new classes are then added with :meth:`imprint`, which never updates a
    network parameter; MTFA variants use :meth:`finetune_novel` instead.
    """

    def __init__(
        self,
        variant: str = "imtfa",
        iterations_stage1: int = 2000,
        iterations_stage2: int = 500,
        lr_stage1: float = 0.02,
        lr_stage2: Optional[float] = None,
        batch_size: int = 4,
        alpha: float = ALPHA_ALL_CLASSES,
        score_threshold: float = 0.05,
        gtoe: bool = False,
        proposal_mode: str = "learned",
        seed: int = 0,
    ):
        self.variant = variant
        self.iterations_stage1 = iterations_stage1
        self.iterations_stage2 = iterations_stage2
        self.lr_stage1 = lr_stage1
        self.lr_stage2 = lr_stage2
        self.batch_size = batch_size
        self.alpha = alpha
        self.score_threshold = score_threshold
        self.gtoe = gtoe
        self.proposal_mode = proposal_mode
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            variant=self.variant,
            lr_stage1=self.lr_stage1,
            lr_stage2=self.lr_stage2,
            batch_size=self.batch_size,
            iterations_stage1=self.iterations_stage1,
            iterations_stage2=self.iterations_stage2,
            seed=self.seed,
        )

    def fit(self, X: ShapesDataset, y=None, *, split: ClassSplit) -> "IMTFADetector":
        X = check_dataset(X)
        self.split_ = check_split(split)
        config = self._train_config()
        base = X.subset(restrict_to_classes(X.manifest, split.base_ids))
        result = train_stage1(base, split.base_ids, config)
        model, registry = result.model, result.registry
        self.history_ = list(result.history)
        if VARIANTS[self.variant][2] == "imtfa":
            result = finetune_imtfa_stage2(model, registry, base, split.base_ids, config)
            model, registry = result.model, result.registry
            self.history_ += result.history
        self.model_ = model
        self.base_registry_ = registry
        self.registry_ = registry
        return self

    def imprint(self, support: ShapesDataset, class_ids: Sequence[int], k: int, seed: int = 0) -> "IMTFADetector":
        """Register ``class_ids`` from ``k`` sampled instances each, starting from the base registry."""
        check_is_fitted(self, "model_")
        support = check_dataset(support)
        if self.model_.config.box_mode != "agnostic":
            raise ValueError(f"variant {self.variant!r} has class-specific heads and cannot imprint")
        shots = sample_shots(support.manifest, class_ids, k, seed)
        self.registry_ = imprint_classes(self.base_registry_, shots, self.model_, support.images)
        return self

    def finetune_novel(self, support: ShapesDataset, k: int, seed: int = 0) -> "IMTFADetector":
        """MTFA-style adaptation on a balanced K-shot base+novel set."""
        check_is_fitted(self, "model_")
        support = check_dataset(support)
        balanced = support.subset(build_balanced_finetune_set(support.manifest, self.split_, k, seed))
        config = self._train_config()
        config.seed = seed
        result = finetune_mtfa(self.model_, self.base_registry_, balanced, self.split_, config)
        self.model_, self.registry_ = result.model, result.registry
        return self

    @property
    def classes_(self) -> tuple[int, ...]:
        check_is_fitted(self, "registry_")
        return self.registry_.foreground_ids

    def _spec(self, class_ids: Optional[Sequence[int]]) -> EpisodeSpec:
        ids = self.classes_ if class_ids is None else check_class_ids(class_ids, self.classes_)
        return EpisodeSpec(ids, gtoe=self.gtoe, score_threshold=self.score_threshold,
                           alpha=self.alpha, proposal_mode=self.proposal_mode, seed=self.seed)

    def _registry_for(self, spec: EpisodeSpec) -> ClassRegistry:
        return self.registry_.restrict(spec.test_class_ids).with_alpha(self.alpha)

    def predict(self, images, ground_truth=None, class_ids: Optional[Sequence[int]] = None) -> list[list[Detection]]:
        """Detections for each image; ``ground_truth`` (one list per image) feeds GTOE and oracle proposals."""
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before predict")
        if isinstance(images, np.ndarray) and images.ndim == 3:
            images = [images]
        spec = self._spec(class_ids)
        registry = self._registry_for(spec)
        gts = ground_truth if ground_truth is not None else [None] * len(images)
        if len(gts) != len(images):
            raise ValueError("ground_truth must hold one entry per image")
        return [run_inference(self.model_, registry, check_image(im), spec, gt) for im, gt in zip(images, gts)]

    def score(self, X: ShapesDataset, y=None, class_ids: Optional[Sequence[int]] = None,
              group: str = "overall", task: str = "segmentation") -> float:
        """Mean AP50 of ``group`` for ``task`` on a labelled test set."""
        check_is_fitted(self, "model_")
        X = check_dataset(X)
        spec = self._spec(class_ids)
        result = evaluate_model(self.model_, self.registry_, X, spec, self.split_.base_ids, self.split_.novel_ids)
        return result["groups"][group][task]["AP50"]

