"""Command-line entry points: generate, train, finetune, imprint, eval, report.

One experiment is one output directory with fixed file names::

    <out>/config.yaml                      resolved configuration
    <out>/data/{train,test}/manifest.json  generated datasets
    <out>/stage1.ckpt, stage1.log.jsonl    base training
    <out>/stage2.ckpt, stage2.log.jsonl    second stage (iMTFA)
    <out>/shots/k<K>.s<seed>.json          sampled support sets
    <out>/registries/k<K>.s<seed>.reg      imprinted registries
    <out>/reports/eval.*.json|.txt|.jsonl  evaluation reports
    <out>/reports/summary.{txt,json}       cross-report comparison
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np
import torch
import yaml
from PIL import Image
from torch.optim.optimizer import register_optimizer_step_pre_hook

from . import __version__
from .evaluate import (
    GROUPS,
    TASKS,
    EpisodeSpec,
    EvalReport,
    evaluate_model,
    imprint_adapter,
    report_to_json,
    run_episodes,
)
from .imprint import (
    ALPHA_ALL_CLASSES,
    ALPHA_MTFA,
    ALPHA_NOVEL_ONLY,
    ClassRegistry,
    imprint_classes,
    load_registry,
    save_registry,
)
from .model import COMPONENTS, DetectorModel, ModelConfig
from .shapesdata import (
    ClassSplit,
    ShapesDataset,
    build_balanced_finetune_set,
    generate_dataset,
    load_dataset,
    load_manifest,
    restrict_to_classes,
    sample_shots,
    save_dataset,
    shots_from_dict,
    shots_to_dict,
)
from .train import (
    VARIANTS,
    TrainConfig,
    finetune_imtfa_stage2,
    finetune_mtfa,
    load_checkpoint,
    save_checkpoint,
    train_one_stage,
    train_stage1,
)

log = logging.getLogger("imtfa")

CONFIG_SCHEMA_VERSION = 1
TEST_FIRST_IMAGE_ID = 1_000_000
TEST_FIRST_INSTANCE_ID = 10_000_000


class ConfigError(ValueError):
    pass


class AuditError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DatasetSection:
    num_base: int = 6
    num_novel: int = 3
    num_train: int = 300
    num_test: int = 100
    image_size: int = 64
    max_instances: int = 4
    base_only_fraction: float = 0.5
    seed: int = 1
    train_manifest: Optional[str] = None
    test_manifest: Optional[str] = None

    @property
    def split(self) -> ClassSplit:
        return ClassSplit.first_n(self.num_base, self.num_novel)


@dataclass
class EvalSection:
    k: list = field(default_factory=lambda: [1, 5, 10])
    num_repeats: int = 10
    alpha: Any = None  # float, list of floats, or None for the per-setting default
    setting: str = "all"  # all | novel | base
    gtoe: bool = False
    gtoe_mode: str = "reresolve"
    score_threshold: float = 0.05
    max_detections_per_image: int = 100
    nms_threshold: float = 0.5
    proposal_mode: str = "learned"
    oracle_jitter: float = 0.0

    def __post_init__(self):
        if self.setting not in ("all", "novel", "base"):
            raise ConfigError(f"eval.setting must be all, novel or base, got {self.setting!r}")
        self.k = [int(k) for k in (self.k if isinstance(self.k, (list, tuple)) else [self.k])]


@dataclass
class ExperimentConfig:
    schema_version: int = CONFIG_SCHEMA_VERSION
    seed: int = 0
    out: str = "runs/toy"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def variant(self) -> str:
        return self.train.variant

    def alphas(self) -> list[float]:
        a = self.eval.alpha
        if a is None:
            if VARIANTS[self.variant][2] == "mtfa":
                return [ALPHA_MTFA]
            return [ALPHA_NOVEL_ONLY if self.eval.setting == "novel" else ALPHA_ALL_CLASSES]
        return [float(x) for x in (a if isinstance(a, (list, tuple)) else [a])]

    def test_class_ids(self) -> tuple[int, ...]:
        split = self.dataset.split
        return {"all": split.all_ids, "novel": split.novel_ids, "base": split.base_ids}[self.eval.setting]

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "out": self.out,
            "dataset": dict(self.dataset.__dict__),
            "train": self.train.to_dict(),
            "eval": dict(self.eval.__dict__),
        }


def _section(cls, doc: Optional[Mapping], where: str):
    doc = dict(doc or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    return cls(**doc)


def config_from_dict(doc: Mapping) -> ExperimentConfig:
    doc = dict(doc or {})
    version = doc.pop("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema_version {version}; expected {CONFIG_SCHEMA_VERSION}")
    unknown = sorted(set(doc) - {"seed", "out", "dataset", "train", "eval"})
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    train_doc = dict(doc.get("train") or {})
    if "model" in train_doc:
        train_doc["model"] = _section(ModelConfig, train_doc["model"], "train.model")
    try:
        train = _section(TrainConfig, train_doc, "train")
        dataset = _section(DatasetSection, doc.get("dataset"), "dataset")
        ev = _section(EvalSection, doc.get("eval"), "eval")
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    seed = int(doc.get("seed", 0))
    if "seed" not in train_doc:
        train = replace(train, seed=seed)
    return ExperimentConfig(CONFIG_SCHEMA_VERSION, seed, str(doc.get("out", "runs/toy")), dataset, train, ev)


def load_config(path: Optional[str]) -> ExperimentConfig:
    if path is None:
        return config_from_dict({})
    text = Path(path).read_text(encoding="utf-8")
    doc = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    return config_from_dict(doc or {})


def apply_overrides(cfg: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    cfg = copy.deepcopy(cfg)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.train = replace(cfg.train, seed=args.seed)
    if getattr(args, "variant", None) and args.variant != cfg.train.variant:
        cfg.train = replace(cfg.train, variant=args.variant, lr_stage2=None)
    if getattr(args, "k", None):
        cfg.eval.k = list(args.k)
    if getattr(args, "alpha", None):
        cfg.eval.alpha = list(args.alpha)
    if getattr(args, "repeats", None) is not None:
        cfg.eval.num_repeats = args.repeats
    if getattr(args, "gtoe", False):
        cfg.eval.gtoe = True
    if getattr(args, "oracle_proposals", False):
        cfg.eval.proposal_mode = "oracle"
    if getattr(args, "out", None):
        cfg.out = args.out
    return cfg


def provenance(cfg: ExperimentConfig, command: str, **extra) -> dict:
    return {"command": command, "version": __version__, "config": cfg.to_dict(), **extra}


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o).__name__)


def _save_resolved(cfg: ExperimentConfig) -> None:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    (cfg.out_dir / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True), encoding="utf-8")


# ---------------------------------------------------------------------------
# paths


def train_manifest_path(cfg: ExperimentConfig) -> Path:
    return Path(cfg.dataset.train_manifest) if cfg.dataset.train_manifest else cfg.out_dir / "data/train/manifest.json"


def test_manifest_path(cfg: ExperimentConfig) -> Path:
    return Path(cfg.dataset.test_manifest) if cfg.dataset.test_manifest else cfg.out_dir / "data/test/manifest.json"


def stage1_path(cfg: ExperimentConfig) -> Path:
    return cfg.out_dir / "stage1.ckpt"


def stage2_path(cfg: ExperimentConfig, k: Optional[int] = None, seed: Optional[int] = None) -> Path:
    if VARIANTS[cfg.variant][2] == "mtfa":
        return cfg.out_dir / f"stage2.k{k}.s{seed}.ckpt"
    return cfg.out_dir / "stage2.ckpt"


def default_checkpoint(cfg: ExperimentConfig) -> Path:
    # MTFA variants adapt per episode from the stage-1 model
    return stage2_path(cfg) if VARIANTS[cfg.variant][2] == "imtfa" else stage1_path(cfg)


def _alpha_tag(alpha: float) -> str:
    return f"{alpha:g}".replace(".", "p")


def report_stem(cfg: ExperimentConfig, k: int, alpha: float) -> str:
    mode = ".oracle" if cfg.eval.proposal_mode == "oracle" else ""
    gtoe = ".gtoe" if cfg.eval.gtoe else ""
    return f"eval.{cfg.variant}.{cfg.eval.setting}.k{k}.a{_alpha_tag(alpha)}{mode}{gtoe}"


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg: ExperimentConfig) -> dict:
    d = cfg.dataset
    split = d.split
    train = generate_dataset(d.num_train, split, d.seed, d.image_size, max_instances=d.max_instances,
                             base_only_fraction=d.base_only_fraction)
    test = generate_dataset(d.num_test, split, d.seed + 1, d.image_size, max_instances=d.max_instances,
                            first_image_id=TEST_FIRST_IMAGE_ID, first_instance_id=TEST_FIRST_INSTANCE_ID)
    paths = {
        "train": save_dataset(train, cfg.out_dir / "data/train"),
        "test": save_dataset(test, cfg.out_dir / "data/test"),
    }
    _save_resolved(cfg)
    _write_json(cfg.out_dir / "data/provenance.json", provenance(cfg, "generate"))
    return paths


def _load_train(cfg: ExperimentConfig) -> ShapesDataset:
    return load_dataset(train_manifest_path(cfg))


def _base_subset(ds: ShapesDataset, split: ClassSplit) -> ShapesDataset:
    return ds.subset(restrict_to_classes(ds.manifest, split.base_ids))


def _fresh_log(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.unlink(missing_ok=True)
    return path


def cmd_train(cfg: ExperimentConfig) -> Path:
    split = cfg.dataset.split
    base = _base_subset(_load_train(cfg), split)
    log_path = _fresh_log(cfg.out_dir / "stage1.log.jsonl")
    if VARIANTS[cfg.variant][2] is None:
        result = train_one_stage(VARIANTS[cfg.variant][1], base, split.base_ids, cfg.train, log_path)
    else:
        result = train_stage1(base, split.base_ids, cfg.train, log_path)
    out = stage1_path(cfg)
    _save_resolved(cfg)
    save_checkpoint(out, result.model, result.registry,
                    provenance(cfg, "train", stage=1, variant=cfg.variant,
                               served_class_ids=sorted(result.served_class_ids)))
    return out


def _check_compatible(model: DetectorModel, registry: ClassRegistry, split: ClassSplit) -> None:
    if registry.embedding_dim != model.config.embedding_dim:
        raise ConfigError(f"registry embedding_dim {registry.embedding_dim} does not match "
                          f"model embedding_dim {model.config.embedding_dim}")
    unknown = sorted(set(registry.foreground_ids) - set(split.all_ids))
    if unknown:
        raise ConfigError(f"registry classes {unknown} are not in the configured class table")


def _check_variant(meta: Mapping, cfg: ExperimentConfig, path: Path) -> None:
    variant = (meta.get("extra") or {}).get("variant")
    if variant is not None and variant != cfg.variant:
        raise ConfigError(f"checkpoint {path} was trained as {variant!r}, config says {cfg.variant!r}")


def _finetune_mtfa_episode(cfg, model, registry, train: ShapesDataset, k: int, seed: int, log_path=None):
    split = cfg.dataset.split
    balanced = train.subset(build_balanced_finetune_set(train.manifest, split, k, seed))
    return finetune_mtfa(model, registry, balanced, split, replace(cfg.train, seed=seed), log_path)


def cmd_finetune(cfg: ExperimentConfig, checkpoint: Optional[Path] = None, k: Optional[int] = None) -> Path:
    second = VARIANTS[cfg.variant][2]
    if second is None:
        raise ConfigError(f"variant {cfg.variant!r} has no fine-tuning stage")
    checkpoint = Path(checkpoint or stage1_path(cfg))
    model, registry, meta = load_checkpoint(checkpoint)
    _check_variant(meta, cfg, checkpoint)
    split = cfg.dataset.split
    _check_compatible(model, registry, split)
    train = _load_train(cfg)
    if second == "imtfa":
        out = stage2_path(cfg)
        log_path = _fresh_log(cfg.out_dir / "stage2.log.jsonl")
        result = finetune_imtfa_stage2(model, registry, _base_subset(train, split), split.base_ids, cfg.train, log_path)
        extra = {}
    else:
        k = k or cfg.eval.k[0]
        out = stage2_path(cfg, k, cfg.seed)
        log_path = _fresh_log(out.with_suffix(".log.jsonl"))
        result = _finetune_mtfa_episode(cfg, model, registry, train, k, cfg.seed, log_path)
        extra = {"k": k}
    _save_resolved(cfg)
    save_checkpoint(out, result.model, result.registry,
                    provenance(cfg, "finetune", stage=2, variant=cfg.variant, source=str(checkpoint),
                               served_class_ids=sorted(result.served_class_ids), **extra))
    return out


class AuditedImages(Mapping):
    """Read-on-demand image store that records every image it serves."""

    def __init__(self, paths: Mapping[int, Path]):
        self._paths = dict(paths)
        self.accessed: list[int] = []

    def __getitem__(self, image_id):
        self.accessed.append(int(image_id))
        return np.asarray(Image.open(self._paths[image_id]).convert("RGB"))

    def __iter__(self):
        return iter(self._paths)

    def __len__(self):
        return len(self._paths)


@contextmanager
def audit_no_training(model: DetectorModel):
    """Fail if gradients are enabled during a forward pass, an optimizer steps, or a parameter changes."""
    record = {"forward_calls": 0, "grad_enabled_calls": 0, "optimizer_steps": 0}

    def hook(module, inputs, output):
        record["forward_calls"] += 1
        if torch.is_grad_enabled():
            record["grad_enabled_calls"] += 1

    def count_step(opt, args, kwargs):
        record["optimizer_steps"] += 1

    before = {k: v.clone() for k, v in model.state_dict().items()}
    handles = [model.get_submodule(name).register_forward_hook(hook) for name in COMPONENTS]
    step_handle = register_optimizer_step_pre_hook(count_step)
    try:
        yield record
    finally:
        step_handle.remove()
        for h in handles:
            h.remove()
    changed = [k for k, v in model.state_dict().items() if not torch.equal(before[k], v)]
    record["parameters_changed"] = changed
    if record["grad_enabled_calls"] or record["optimizer_steps"] or changed:
        raise AuditError(f"imprinting trained the network: {record}")


def sample_shot_file(cfg: ExperimentConfig, k: int, seed: int) -> Path:
    """Sample K shots per novel class from the training manifest into a self-contained shot file."""
    manifest_path = train_manifest_path(cfg)
    ds_manifest = load_manifest(manifest_path)
    shots = sample_shots(ds_manifest, cfg.dataset.split.novel_ids, k, seed)
    doc = shots_to_dict(shots, ds_manifest)
    doc["image_root"] = str(manifest_path.parent.resolve())
    doc["k"] = k
    out = cfg.out_dir / f"shots/k{k}.s{seed}.json"
    _write_json(out, doc)
    return out


def cmd_imprint(cfg: ExperimentConfig, checkpoint: Optional[Path] = None, registry_path: Optional[Path] = None,
                shots_path: Optional[Path] = None, k: Optional[int] = None, out: Optional[Path] = None) -> tuple[Path, dict]:
    """Append imprinted columns for every class in a shot file; no parameter is ever updated."""
    seed = cfg.seed
    if shots_path is None:
        k = k or cfg.eval.k[0]
        shots_path = sample_shot_file(cfg, k, seed)
    shots_path = Path(shots_path)
    doc = json.loads(shots_path.read_text(encoding="utf-8"))
    shot_sets = shots_from_dict(doc)
    root = Path(doc.get("image_root", shots_path.parent))
    files = {int(e["image_id"]): root / e["file_name"] for e in doc["shots"] if "file_name" in e}
    missing = sorted({int(e["image_id"]) for e in doc["shots"]} - set(files))
    if missing:
        raise ConfigError(f"shot file {shots_path} lacks file names for images {missing}")

    checkpoint = Path(checkpoint or default_checkpoint(cfg))
    model, base_registry, meta = load_checkpoint(checkpoint)
    if model.config.box_mode != "agnostic":
        raise ConfigError(f"checkpoint {checkpoint} has class-specific heads; imprinting needs class-agnostic ones")
    if registry_path is not None:
        base_registry = load_registry(registry_path, model.config.embedding_dim)
    _check_compatible(model, base_registry, cfg.dataset.split)

    images = AuditedImages(files)
    start = time.perf_counter()
    with torch.no_grad(), audit_no_training(model) as audit:
        registry = imprint_classes(base_registry, shot_sets, model, images)
    audit["seconds"] = time.perf_counter() - start
    audit["images_read"] = sorted(set(images.accessed))
    if not set(images.accessed) <= {s.image_id for ss in shot_sets for s in ss.shots}:
        raise AuditError("imprinting read images outside the shot set")
    audit["columns_added"] = registry.num_columns - base_registry.num_columns

    out = Path(out) if out else cfg.out_dir / "registries" / (shots_path.stem + ".reg")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_registry(registry, out, provenance(cfg, "imprint", checkpoint=str(checkpoint), shots=str(shots_path),
                                            audit=audit))
    return out, audit


def _episode_spec(cfg: ExperimentConfig, k: int, alpha: float) -> EpisodeSpec:
    e = cfg.eval
    return EpisodeSpec(cfg.test_class_ids(), k=k, seed=cfg.seed, gtoe=e.gtoe, score_threshold=e.score_threshold,
                       max_detections_per_image=e.max_detections_per_image, nms_threshold=e.nms_threshold,
                       alpha=alpha, proposal_mode=e.proposal_mode, oracle_jitter=e.oracle_jitter,
                       gtoe_mode=e.gtoe_mode)


def _write_report(cfg: ExperimentConfig, stem: str, report: EvalReport) -> Path:
    reports = cfg.out_dir / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    path = reports / f"{stem}.json"
    path.write_text(report_to_json(report) + "\n", encoding="utf-8")
    with open(reports / f"{stem}.seeds.jsonl", "w", encoding="utf-8") as fh:
        for rec in report.per_seed:
            fh.write(json.dumps({k: rec[k] for k in ("seed", "k", "groups", "excluded")}, sort_keys=True) + "\n")
    (reports / f"{stem}.txt").write_text(report.format_table(stem) + "\n", encoding="utf-8")
    return path


def cmd_eval(cfg: ExperimentConfig, checkpoint: Optional[Path] = None,
             registry_path: Optional[Path] = None) -> list[Path]:
    """Evaluate for every configured K and alpha; one report file per (K, alpha)."""
    checkpoint = Path(checkpoint or default_checkpoint(cfg))
    model, base_registry, meta = load_checkpoint(checkpoint)
    _check_variant(meta, cfg, checkpoint)
    split = cfg.dataset.split
    test = load_dataset(test_manifest_path(cfg))
    outputs = []

    if registry_path is not None:
        registry = load_registry(registry_path, model.config.embedding_dim)
        _check_compatible(model, registry, split)
        for alpha in cfg.alphas():
            spec = _episode_spec(cfg, cfg.eval.k[0], alpha)
            result = evaluate_model(model, registry, test, spec, split.base_ids, split.novel_ids)
            record = {"seed": spec.seed, "k": spec.k, "groups": result["groups"], "per_class": result["per_class"],
                      "excluded": result["excluded"]}
            report = EvalReport(result["groups"], _zeros_like(result["groups"]), [record], result["per_class"],
                                _spec_dict(spec), provenance(cfg, "eval", checkpoint=str(checkpoint),
                                                             registry=str(registry_path)))
            stem = f"eval.{cfg.variant}.{cfg.eval.setting}.{Path(registry_path).stem}.a{_alpha_tag(alpha)}"
            outputs.append(_write_report(cfg, stem, report))
        return outputs

    _check_compatible(model, base_registry, split)
    needs_novel = bool(set(cfg.test_class_ids()) - set(base_registry.foreground_ids))
    train = _load_train(cfg) if needs_novel else None
    for k in cfg.eval.k:
        for alpha in cfg.alphas():
            spec = _episode_spec(cfg, k, alpha)
            adapter = _adapter(cfg, model, base_registry, train, needs_novel)
            report = run_episodes(model, base_registry, train, test, spec, cfg.eval.num_repeats,
                                  split.base_ids, split.novel_ids, adapter)
            report.provenance = provenance(cfg, "eval", checkpoint=str(checkpoint))
            outputs.append(_write_report(cfg, report_stem(cfg, k, alpha), report))
    return outputs


def _adapter(cfg, model, base_registry, train, needs_novel):
    split = cfg.dataset.split
    if not needs_novel:
        return lambda seed, spec: (model, base_registry)
    if VARIANTS[cfg.variant][2] == "mtfa":
        def adapt(seed, spec):
            result = _finetune_mtfa_episode(cfg, model, base_registry, train, spec.k, seed)
            return result.model, result.registry

        return adapt
    if model.config.box_mode != "agnostic":
        raise ConfigError(f"variant {cfg.variant!r} cannot imprint novel classes")
    return imprint_adapter(model, base_registry, train, split.novel_ids)


def _zeros_like(groups: Mapping) -> dict:
    return {g: {t: {m: 0.0 for m in v} for t, v in tasks.items()} for g, tasks in groups.items()}


def _spec_dict(spec: EpisodeSpec) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in spec.__dict__.items()}


# ---------------------------------------------------------------------------
# reporting


def _fmt(v: Optional[float]) -> str:
    return f"{'-':>6}" if v is None or v != v else f"{100 * v:6.2f}"


def load_reports(paths: Sequence[Path]) -> list[tuple[str, EvalReport]]:
    out = []
    for p in paths:
        p = Path(p)
        out.append((p.stem, EvalReport.from_dict(json.loads(p.read_text(encoding="utf-8")))))
    return out


def _setting(report: EvalReport) -> str:
    cfg = report.provenance.get("config", {})
    return cfg.get("eval", {}).get("setting", "all")


def _variant(report: EvalReport) -> str:
    return report.provenance.get("config", {}).get("train", {}).get("variant", "?")


def _is_episodic(report: EvalReport) -> bool:
    return "registry" not in report.provenance


def comparison_table(reports: Sequence[tuple[str, EvalReport]]) -> str:
    groups = " ".join(f"{g.capitalize():^13}" for g in GROUPS)
    metrics = " ".join(f"{'AP':>6} {'AP50':>6}" for _ in GROUPS)
    width = max([44] + [len(n) for n, _ in reports])
    lines = [
        f"{'':<{width}} | {'Detection':^41} | {'Segmentation':^41}",
        f"{'':<{width}} | {groups} | {groups}",
        f"{'report':<{width}} | {metrics} | {metrics}",
    ]
    for name, r in reports:
        cells = " | ".join(" ".join(f"{_fmt(r.mean[g][t]['AP'])} {_fmt(r.mean[g][t]['AP50'])}" for g in GROUPS)
                           for t in TASKS)
        lines.append(f"{name:<{width}} | {cells}")
    return "\n".join(lines)


def k_sweep_table(reports: Sequence[tuple[str, EvalReport]]) -> str:
    rows = sorted(((_variant(r), _setting(r), r.spec.get("alpha") or 0.0, r.spec.get("k"), r)
                   for _, r in reports if _is_episodic(r)), key=lambda x: x[:4])
    lines = ["K sweep: novel AP50, mean (std) over seeds",
             f"{'variant':<20} {'setting':<8} {'alpha':>6} {'K':>3} | {'Detection':^16} | {'Segmentation':^16}"]
    for variant, setting, alpha, k, r in rows:
        cells = " | ".join(f"{_fmt(r.mean['novel'][t]['AP50'])} ({_fmt(r.std['novel'][t]['AP50']).strip():>6})"
                           for t in TASKS)
        lines.append(f"{variant:<20} {setting:<8} {alpha:>6g} {k:>3} | {cells}")
    return "\n".join(lines)


def alpha_sweep(reports: Sequence[tuple[str, EvalReport]]) -> dict:
    """``{(K, alpha): {"novel": {...}, "all": {...}}}`` AP cells, one row per (K, alpha)."""
    table: dict = {}
    for _, r in reports:
        alpha = r.spec.get("alpha")
        setting = _setting(r)
        if alpha is None or setting not in ("novel", "all") or not _is_episodic(r):
            continue
        row = table.setdefault((int(r.spec.get("k", 0)), float(alpha)), {})
        if setting == "novel":
            row["novel"] = {t: r.mean["overall"][t]["AP"] for t in TASKS}
        else:
            row["all"] = {t: {"overall": r.mean["overall"][t]["AP"], "novel": r.mean["novel"][t]["AP"]}
                          for t in TASKS}
    return dict(sorted(table.items()))


def alpha_sweep_table(sweep: Mapping) -> str:
    lines = [
        "Cosine scaling factor sweep (AP)",
        f"{'':>3} {'':>6} | {'Novel-only':^15} | {'All classes':^33}",
        f"{'':>3} {'':>6} | {'Det':>7} {'Seg':>7} | {'Det':^15} | {'Seg':^15}",
        f"{'K':>3} {'alpha':>6} | {'Overall':>7} {'Overall':>7} | {'Overall':>7} {'Novel':>7} | {'Overall':>7} {'Novel':>7}",
    ]
    dash = f"{'-':>7}"
    for (k, alpha), row in sweep.items():
        nov, al = row.get("novel"), row.get("all")
        left = f"{_fmt(nov['detection']):>7} {_fmt(nov['segmentation']):>7}" if nov else f"{dash} {dash}"
        if al:
            right = (f"{_fmt(al['detection']['overall']):>7} {_fmt(al['detection']['novel']):>7} | "
                     f"{_fmt(al['segmentation']['overall']):>7} {_fmt(al['segmentation']['novel']):>7}")
        else:
            right = f"{dash} {dash} | {dash} {dash}"
        lines.append(f"{k:>3} {alpha:>6g} | {left} | {right}")
    return "\n".join(lines)


def cmd_report(report_paths: Sequence[Path], out_dir: Optional[Path] = None) -> str:
    if not report_paths:
        raise ConfigError("no report files given")
    reports = load_reports(report_paths)
    sweep = alpha_sweep(reports)
    text = "\n\n".join([comparison_table(reports), k_sweep_table(reports), alpha_sweep_table(sweep)]) + "\n"
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "summary.txt").write_text(text, encoding="utf-8")
        _write_json(out_dir / "summary.json", {
            "reports": {n: r.mean for n, r in reports},
            "alpha_sweep": [{"k": k, "alpha": a, **v} for (k, a), v in sweep.items()],
            "k_sweep": [{"report": n, "k": r.spec.get("k"), "alpha": r.spec.get("alpha"),
                         "novel_mean": r.mean["novel"], "novel_std": r.std["novel"]} for n, r in reports],
        })
    return text


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="imtfa", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML or JSON experiment config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--variant", choices=sorted(VARIANTS))
        sp.add_argument("--out", help="experiment output directory")
        return sp

    common(sub.add_parser("generate", help="render the synthetic train and test sets"))
    common(sub.add_parser("train", help="base training (stage 1 or a one-stage baseline)"))
    ft = common(sub.add_parser("finetune", help="second training stage"))
    ft.add_argument("--checkpoint")
    ft.add_argument("--k", type=int, action="append", help="shots per class (MTFA variants)")

    im = common(sub.add_parser("imprint", help="add novel classes by weight imprinting"))
    im.add_argument("--checkpoint")
    im.add_argument("--registry", help="start from this registry instead of the checkpoint's")
    im.add_argument("--shots", help="shot file; sampled from the training set when omitted")
    im.add_argument("--k", type=int, action="append")
    im.add_argument("--output", help="registry file to write")

    ev = common(sub.add_parser("eval", help="episodic evaluation"))
    ev.add_argument("--checkpoint")
    ev.add_argument("--registry", help="evaluate a precomputed registry instead of sampling episodes")
    ev.add_argument("--k", type=int, action="append")
    ev.add_argument("--alpha", type=float, action="append")
    ev.add_argument("--repeats", type=int)
    ev.add_argument("--gtoe", action="store_true")
    ev.add_argument("--oracle-proposals", action="store_true")

    rp = sub.add_parser("report", help="comparison, K-sweep and alpha-sweep tables")
    rp.add_argument("reports", nargs="+")
    rp.add_argument("--out", help="directory for summary.txt and summary.json")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    try:
        if args.command == "report":
            print(cmd_report([Path(p) for p in args.reports], args.out), end="")
            return 0
        cfg = apply_overrides(load_config(args.config), args)
        if args.command == "generate":
            for name, path in cmd_generate(cfg).items():
                print(f"{name}: {path}")
        elif args.command == "train":
            print(cmd_train(cfg))
        elif args.command == "finetune":
            print(cmd_finetune(cfg, args.checkpoint, args.k[0] if args.k else None))
        elif args.command == "imprint":
            path, audit = cmd_imprint(cfg, args.checkpoint, args.registry, args.shots,
                                      args.k[0] if args.k else None, args.output)
            print(f"{path} (+{audit['columns_added']} columns, {audit['seconds']:.3f}s, no parameter updates)")
        elif args.command == "eval":
            for path in cmd_eval(cfg, args.checkpoint, args.registry):
                print(path)
    except Exception as exc:  # noqa: BLE001 - one diagnostic line, nonzero exit
        if args.verbose:
            log.exception("failed")
        print(f"imtfa {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
