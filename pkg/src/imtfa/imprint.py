"""Cosine-similarity classifier and the incremental class-representative registry."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .container import ContainerError, read_container, write_container
from .shapesdata import ShotSet

NORM_EPS = 1e-8
BACKGROUND_ID = 0
TRAINED = "trained"
IMPRINTED = "imprinted"

# alpha defaults per evaluation setting
ALPHA_NOVEL_ONLY = 1.0
ALPHA_ALL_CLASSES = 10.0
ALPHA_MTFA = 20.0


class RegistryError(ValueError):
    pass


class ZeroNormError(RegistryError):
    pass


@dataclass(frozen=True, eq=False)
class ClassRegistry:
    """Classifier weight matrix ``W`` (``e x c``) plus per-column bookkeeping.

    Instances are immutable; :func:`imprint_class` and :func:`remove_class`
    return new registries and leave the receiver untouched.
    """

    weights: np.ndarray
    alpha: float
    class_ids: tuple[int, ...]
    origins: tuple[str, ...]
    background_index: Optional[int] = None
    metric: str = "cosine"

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float32, copy=True)
        if w.ndim != 2:
            raise RegistryError(f"weights must be e x c, got shape {w.shape}")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "class_ids", tuple(int(c) for c in self.class_ids))
        object.__setattr__(self, "origins", tuple(self.origins))
        object.__setattr__(self, "alpha", float(self.alpha))
        if self.metric not in ("cosine", "linear"):
            raise RegistryError(f"unknown metric {self.metric!r}")
        if not self.alpha > 0:
            raise RegistryError(f"alpha must be positive, got {self.alpha}")
        if len(self.class_ids) != w.shape[1] or len(self.origins) != w.shape[1]:
            raise RegistryError("column count must match class_ids and origins")
        if len(set(self.class_ids)) != len(self.class_ids):
            raise RegistryError("duplicate class ids in registry")
        if not np.isfinite(w).all():
            raise RegistryError("registry weights must be finite")
        for cid, origin in zip(self.class_ids, self.origins):
            if origin not in (TRAINED, IMPRINTED):
                raise RegistryError(f"class {cid}: unknown origin {origin!r}")
        if self.background_index is not None:
            if self.origins[self.background_index] != TRAINED:
                raise RegistryError("background column must be trained")

    @property
    def embedding_dim(self) -> int:
        return int(self.weights.shape[0])

    @property
    def num_columns(self) -> int:
        return int(self.weights.shape[1])

    @property
    def foreground_ids(self) -> tuple[int, ...]:
        return tuple(c for i, c in enumerate(self.class_ids) if i != self.background_index)

    def column(self, class_id: int) -> int:
        try:
            return self.class_ids.index(class_id)
        except ValueError:
            raise RegistryError(f"class {class_id} is not registered") from None

    def with_alpha(self, alpha: float) -> "ClassRegistry":
        return replace(self, alpha=alpha)

    def restrict(self, class_ids: Sequence[int]) -> "ClassRegistry":
        """Keep the listed foreground columns (in registry order) plus background."""
        wanted = set(class_ids)
        missing = wanted - set(self.foreground_ids)
        if missing:
            raise RegistryError(f"classes {sorted(missing)} are not registered")
        keep = [i for i, c in enumerate(self.class_ids) if c in wanted or i == self.background_index]
        bg = keep.index(self.background_index) if self.background_index is not None else None
        return ClassRegistry(
            self.weights[:, keep],
            self.alpha,
            tuple(self.class_ids[i] for i in keep),
            tuple(self.origins[i] for i in keep),
            bg,
            self.metric,
        )

    def identical_to(self, other: "ClassRegistry") -> bool:
        return (
            self.weights.shape == other.weights.shape
            and self.weights.tobytes() == other.weights.tobytes()
            and self.alpha == other.alpha
            and self.class_ids == other.class_ids
            and self.origins == other.origins
            and self.background_index == other.background_index
            and self.metric == other.metric
        )

    def metadata(self) -> dict:
        return {
            "embedding_dim": self.embedding_dim,
            "num_columns": self.num_columns,
            "alpha": self.alpha,
            "class_ids": list(self.class_ids),
            "origins": list(self.origins),
            "background_index": self.background_index,
            "metric": self.metric,
        }


def initial_registry(
    embedding_dim: int, class_ids: Sequence[int], alpha: float, metric: str = "cosine", seed: int = 0
) -> ClassRegistry:
    """Randomly initialised trained columns: background first, then ``class_ids``."""
    g = torch.Generator().manual_seed(seed)
    n = len(class_ids) + 1
    w = torch.randn(embedding_dim, n, generator=g) * 0.1
    return ClassRegistry(
        w.numpy(), alpha, (BACKGROUND_ID, *class_ids), (TRAINED,) * n, 0, metric
    )


def _as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.tensor(np.asarray(x), dtype=dtype)


def cosine_scores(z, weights, alpha: float = 1.0) -> torch.Tensor:
    """``S[i, j] = alpha * <z_i, w_j> / (|z_i| |w_j|)``.

    ``weights`` is an ``e x c`` matrix or a :class:`ClassRegistry` (whose
    ``alpha`` is then used). Columns are scored one at a time so a column's
    scores never depend on which other columns are present.
    """
    if isinstance(weights, ClassRegistry):
        alpha = weights.alpha
        weights = weights.weights
    z = _as_tensor(z)
    if not z.is_floating_point():
        z = z.double()
    w = _as_tensor(weights, z.dtype)
    z_norm = z.norm(dim=1, keepdim=True)
    bad_rows = torch.nonzero(z_norm[:, 0] < NORM_EPS).flatten()
    if len(bad_rows):
        raise ZeroNormError(f"embedding row {int(bad_rows[0])} has norm below {NORM_EPS}")
    zn = z / z_norm
    cols = []
    for j in range(w.shape[1]):
        col = w[:, j]
        norm = col.norm()
        if norm < NORM_EPS:
            raise ZeroNormError(f"weight column {j} has norm below {NORM_EPS}")
        # rounding can push a parallel pair just past 1
        cols.append(torch.clamp(zn @ (col / norm), -1.0, 1.0))
    if not cols:
        return z.new_zeros((z.shape[0], 0))
    return alpha * torch.stack(cols, dim=1)


def linear_scores(z, weights) -> torch.Tensor:
    """Un-normalised dot-product scores ``S[i, j] = <z_i, w_j>``."""
    if isinstance(weights, ClassRegistry):
        weights = weights.weights
    z = _as_tensor(z)
    w = _as_tensor(weights, z.dtype)
    cols = [z @ w[:, j] for j in range(w.shape[1])]
    if not cols:
        return z.new_zeros((z.shape[0], 0))
    return torch.stack(cols, dim=1)


def registry_scores(z, reg: ClassRegistry) -> torch.Tensor:
    if reg.metric == "linear":
        return linear_scores(z, reg)
    return cosine_scores(z, reg)


def classify(scores) -> tuple[torch.Tensor, torch.Tensor]:
    """Row-wise softmax probabilities and argmax column."""
    s = _as_tensor(scores)
    probs = torch.softmax(s, dim=1)
    return probs, torch.argmax(s, dim=1)


def merge_shot_embeddings(zs, shot_ids: Optional[Sequence] = None) -> np.ndarray:
    """Mean of unit-normalised shot embeddings, summed in ``shot_ids`` order.

    The mean is deliberately not re-normalised; cosine scoring normalises it.
    """
    z = np.asarray(zs.detach().numpy() if isinstance(zs, torch.Tensor) else zs, dtype=np.float64)
    if z.ndim == 1:
        z = z[None]
    if z.shape[0] < 1:
        raise RegistryError("need at least one shot embedding")
    order = np.argsort(np.asarray(shot_ids), kind="stable") if shot_ids is not None else np.arange(len(z))
    norms = np.linalg.norm(z, axis=1)
    if (norms < NORM_EPS).any():
        raise ZeroNormError(f"shot {int(np.flatnonzero(norms < NORM_EPS)[0])} has a zero-norm embedding")
    total = np.zeros(z.shape[1], dtype=np.float64)
    for i in order:
        total += z[i] / norms[i]
    return total / len(z)


def append_column(reg: ClassRegistry, class_id: int, column, origin: str = IMPRINTED) -> ClassRegistry:
    if class_id in reg.class_ids:
        raise RegistryError(f"class {class_id} is already registered")
    col = np.asarray(column, dtype=np.float32).reshape(-1, 1)
    if col.shape[0] != reg.embedding_dim:
        raise RegistryError(f"column has dimension {col.shape[0]}, registry expects {reg.embedding_dim}")
    if np.linalg.norm(col) < NORM_EPS:
        raise ZeroNormError(f"class {class_id}: zero-norm representative")
    return ClassRegistry(
        np.concatenate([reg.weights, col], axis=1),
        reg.alpha,
        reg.class_ids + (int(class_id),),
        reg.origins + (origin,),
        reg.background_index,
        reg.metric,
    )


@torch.no_grad()
def shot_embeddings(model, shots: ShotSet, images: Mapping[int, np.ndarray]) -> torch.Tensor:
    """Embeddings of each shot's ground-truth box (masks are never read)."""
    was_training = model.training
    model.eval()
    try:
        by_image: dict[int, list[int]] = {}
        for i, rec in enumerate(shots.shots):
            by_image.setdefault(rec.image_id, []).append(i)
        out = [None] * len(shots.shots)
        for image_id in sorted(by_image):
            feature = model.backbone_forward(images[image_id])
            idx = by_image[image_id]
            boxes = torch.tensor([shots.shots[i].annotation.box.as_list() for i in idx], dtype=torch.float32)
            z = model.embed(model.pool(feature, boxes))
            for row, i in enumerate(idx):
                out[i] = z[row]
        return torch.stack(out)
    finally:
        model.train(was_training)


def imprint_class(reg: ClassRegistry, class_id: int, shots: ShotSet, model, images: Mapping[int, np.ndarray]) -> ClassRegistry:
    """Append the averaged unit-normalised shot embedding as a new column."""
    if class_id in reg.class_ids:
        raise RegistryError(f"class {class_id} is already registered")
    if shots.k < 1:
        raise RegistryError("shot set is empty")
    z = shot_embeddings(model, shots, images)
    rep = merge_shot_embeddings(z, [s.instance_id for s in shots.shots])
    return append_column(reg, class_id, rep, IMPRINTED)


def imprint_classes(reg: ClassRegistry, shot_sets: Sequence[ShotSet], model, images) -> ClassRegistry:
    for s in shot_sets:
        reg = imprint_class(reg, s.class_id, s, model, images)
    return reg


def remove_class(reg: ClassRegistry, class_id: int) -> ClassRegistry:
    j = reg.column(class_id)
    if j == reg.background_index:
        raise RegistryError("the background column cannot be removed")
    if reg.origins[j] != IMPRINTED:
        raise RegistryError(f"class {class_id} is a trained column and cannot be removed")
    keep = [i for i in range(reg.num_columns) if i != j]
    bg = reg.background_index
    if bg is not None and bg > j:
        bg -= 1
    return ClassRegistry(
        reg.weights[:, keep],
        reg.alpha,
        tuple(reg.class_ids[i] for i in keep),
        tuple(reg.origins[i] for i in keep),
        bg,
        reg.metric,
    )


def save_registry(reg: ClassRegistry, path, extra_meta: Optional[dict] = None) -> None:
    meta = reg.metadata()
    if extra_meta:
        meta["extra"] = extra_meta
    write_container(path, "registry", meta, {"W": reg.weights})


def registry_from_meta(meta: dict, w: np.ndarray) -> ClassRegistry:
    e, c = int(meta["embedding_dim"]), int(meta["num_columns"])
    if w.shape != (e, c):
        raise RegistryError(f"registry header says {e}x{c}, data block is {w.shape}")
    return ClassRegistry(w, meta["alpha"], tuple(meta["class_ids"]), tuple(meta["origins"]),
                         meta["background_index"], meta.get("metric", "cosine"))


def load_registry(path, embedding_dim: Optional[int] = None) -> ClassRegistry:
    try:
        meta, blocks = read_container(path, "registry")
    except ContainerError as exc:
        raise RegistryError(str(exc)) from None
    reg = registry_from_meta(meta, blocks["W"])
    if embedding_dim is not None and reg.embedding_dim != embedding_dim:
        raise RegistryError(f"registry embedding_dim {reg.embedding_dim} != model embedding_dim {embedding_dim}")
    return reg


class ClassifierHead(nn.Module):
    """Trainable view of a registry used during the training stages."""

    def __init__(self, reg: ClassRegistry):
        super().__init__()
        self.weight = nn.Parameter(torch.from_numpy(reg.weights.copy()))
        self.alpha = reg.alpha
        self.metric = reg.metric
        self.class_ids = reg.class_ids
        self.origins = reg.origins
        self.background_index = reg.background_index

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if self.metric == "linear":
            return linear_scores(z, self.weight)
        return cosine_scores(z, self.weight, self.alpha)

    def target_indices(self, class_ids: Sequence[int]) -> torch.Tensor:
        return torch.tensor([self.class_ids.index(int(c)) for c in class_ids], dtype=torch.long)

    def to_registry(self) -> ClassRegistry:
        return ClassRegistry(self.weight.detach().numpy().copy(), self.alpha, self.class_ids, self.origins,
                             self.background_index, self.metric)
