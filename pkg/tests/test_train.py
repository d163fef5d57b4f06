import json
import math

import numpy as np
import pytest
import torch

from imtfa.core import Box, InstanceAnnotation
from imtfa.imprint import ClassifierHead, initial_registry
from imtfa.model import ModelConfig, build_model
from imtfa.shapesdata import ClassSplit, generate_dataset, restrict_to_classes, build_balanced_finetune_set
from imtfa.train import (
    Batch,
    BatchLoader,
    FreezeViolation,
    SplitViolation,
    TrainConfig,
    _optimise,
    compute_losses,
    default_freeze_map,
    finetune_imtfa_stage2,
    finetune_mtfa,
    load_checkpoint,
    save_checkpoint,
    train_one_stage,
    train_stage1,
)

SPLIT = ClassSplit.first_n(6, 3)


@pytest.fixture(scope="module")
def data():
    ds = generate_dataset(40, SPLIT, seed=0, image_size=64, base_only_fraction=0.5)
    base = ds.subset(restrict_to_classes(ds.manifest, SPLIT.base_ids))
    return ds, base


@pytest.fixture(scope="module")
def stage1(data):
    _, base = data
    cfg = TrainConfig(iterations_stage1=30, iterations_stage2=10, batch_size=2)
    return cfg, train_stage1(base, SPLIT.base_ids, cfg)


def test_uniform_scores_give_log_c_loss():
    c = 7
    loss = torch.nn.functional.cross_entropy(torch.zeros(5, c), torch.tensor([0, 1, 2, 3, 6]))
    assert loss.item() == pytest.approx(math.log(c), abs=1e-6)


def test_cls_loss_uniform_for_identical_columns():
    # every column equal -> cosine scores equal across a row -> loss ln(c)
    model = build_model(seed=0)
    reg = initial_registry(128, [1, 2, 3], 20.0)
    w = np.repeat(reg.weights[:, :1], 4, axis=1)
    head = ClassifierHead(type(reg)(w, 20.0, reg.class_ids, reg.origins, 0))
    img = np.zeros((1, 3, 64, 64), dtype=np.float32)
    anns = [[InstanceAnnotation(2, Box(8, 8, 30, 30), mask=None)]]
    cfg = TrainConfig()
    losses = compute_losses(Batch(torch.tensor(img), anns, [0]), model, head, cfg,
                            frozen={"mask_head": True}, proposal_mode="oracle")
    assert losses.cls_loss.item() == pytest.approx(math.log(4), abs=1e-5)


def test_zero_foreground_gives_zero_box_and_mask_loss():
    model = build_model(seed=0)
    head = ClassifierHead(initial_registry(128, [1, 2], 20.0))
    batch = Batch(torch.zeros(1, 3, 64, 64), [[]], [0])
    losses = compute_losses(batch, model, head, TrainConfig())
    assert losses.box_loss.item() == 0.0 and losses.mask_loss.item() == 0.0
    assert torch.isfinite(losses.total)


def test_single_image_overfit_oracle_proposals(data):
    ds, _ = data
    image_id = ds.manifest.images[0].image_id
    one = ds.subset(type(ds.manifest)(ds.manifest.class_table, (ds.manifest.image(image_id),),
                                      tuple(a for a in ds.manifest.annotations if a.image_id == image_id)))
    ids = sorted(one.manifest.class_ids_present())
    cfg = TrainConfig(batch_size=1, flip=False, lr_stage1=0.01, weight_decay=0.0, seed=0)
    model = build_model(cfg.model, seed=0)
    head = ClassifierHead(initial_registry(128, ids, cfg.alpha))
    history, _ = _optimise(model, head, one, cfg, {"rpn": True}, 1500, cfg.lr_stage1, "overfit", "oracle")
    last = history[-1]
    for name in ("cls_loss", "box_loss", "mask_loss"):
        assert last[name] < 1e-3, (name, last[name])


def test_stage1_structure(stage1):
    cfg, res = stage1
    assert res.registry.num_columns == len(SPLIT.base_ids) + 1
    assert res.registry.class_ids[0] == 0 and res.registry.background_index == 0
    assert res.served_class_ids <= set(SPLIT.base_ids)
    totals = [h["total"] for h in res.history]
    assert np.median(totals[-10:]) < np.median(totals[:10])


def test_stage1_rejects_novel_data(data):
    ds, _ = data
    with pytest.raises(SplitViolation, match="outside"):
        train_stage1(ds, SPLIT.base_ids, TrainConfig(iterations_stage1=1))


def test_training_is_deterministic(data, stage1):
    _, base = data
    cfg, res = stage1
    again = train_stage1(base, SPLIT.base_ids, cfg)
    assert again.registry.identical_to(res.registry)
    for k, v in res.model.state_dict().items():
        assert torch.equal(v, again.model.state_dict()[k])


def test_one_stage_cosine_matches_stage1(data, stage1):
    _, base = data
    cfg, res = stage1
    other = train_one_stage("cosine", base, SPLIT.base_ids, cfg)
    assert other.registry.identical_to(res.registry)
    linear = train_one_stage("linear", base, SPLIT.base_ids, TrainConfig(iterations_stage1=3, batch_size=2))
    assert linear.registry.metric == "linear"
    with pytest.raises(ValueError):
        train_one_stage("mtfa", base, SPLIT.base_ids, cfg)


def test_imtfa_stage2_freezes_backbone_and_rpn(data, stage1):
    _, base = data
    cfg, res = stage1
    out = finetune_imtfa_stage2(res.model, res.registry, base, SPLIT.base_ids, cfg)
    for comp in ("backbone", "rpn", "mask_head"):
        a = res.model.component(comp).state_dict()
        b = out.model.component(comp).state_dict()
        assert all(torch.equal(a[k], b[k]) for k in a)
    assert not torch.equal(res.model.roi_extractor.fc1.weight, out.model.roi_extractor.fc1.weight)
    assert out.served_class_ids <= set(SPLIT.base_ids)


def test_mtfa_grows_classifier_and_freezes(data):
    ds, base = data
    cfg = TrainConfig(variant="mtfa", iterations_stage1=5, iterations_stage2=5, batch_size=2)
    res = train_stage1(base, SPLIT.base_ids, cfg)
    balanced = ds.subset(build_balanced_finetune_set(ds.manifest, SPLIT, 2, seed=0))
    out = finetune_mtfa(res.model, res.registry, balanced, SPLIT, cfg)
    assert out.registry.num_columns == len(SPLIT.all_ids) + 1
    assert out.model.box_head.class_ids == list(SPLIT.all_ids)
    for comp in ("backbone", "rpn", "roi_extractor"):
        a = res.model.component(comp).state_dict()
        b = out.model.component(comp).state_dict()
        assert all(torch.equal(a[k], b[k]) for k in a)


def test_freeze_maps():
    assert not any(default_freeze_map("imtfa", 1).values())
    s2 = default_freeze_map("imtfa", 2)
    assert s2["backbone"] and s2["rpn"] and s2["mask_head"] and not s2["roi_extractor"]
    m2 = default_freeze_map("mtfa", 2)
    assert m2["roi_extractor"] and not m2["mask_head"] and not m2["box_head"]
    assert default_freeze_map("ca_mtfa_no_ft_mask", 2)["mask_head"]
    with pytest.raises(ValueError):
        default_freeze_map("one_stage_cosine", 2)


def test_freeze_violation_detected(data):
    _, base = data
    model = build_model(seed=0)
    head = ClassifierHead(initial_registry(128, SPLIT.base_ids, 20.0))
    cfg = TrainConfig(batch_size=2)

    def tamper(module, inputs, output):
        with torch.no_grad():
            model.backbone.blocks[0][0].bias.add_(1e-3)

    # a side channel that mutates a frozen parameter; the snapshot check must notice
    model.roi_extractor.register_forward_hook(tamper)
    with pytest.raises(FreezeViolation, match="backbone"):
        _optimise(model, head, base, cfg, {"backbone": True}, 2, 0.01, "leak")


def test_stage2_learning_rate_defaults():
    assert TrainConfig(variant="imtfa").lr_stage2 == 0.0007
    assert TrainConfig(variant="mtfa").lr_stage2 == 0.0005
    assert TrainConfig(variant="mtfa", lr_stage2=0.01).lr_stage2 == 0.01
    with pytest.raises(ValueError):
        TrainConfig(variant="faster")


def test_loader_records_served_classes(data):
    _, base = data
    loader = BatchLoader(base, 2, seed=0)
    it = iter(loader)
    for _ in range(5):
        next(it)
    assert loader.served_class_ids and loader.served_class_ids <= set(SPLIT.base_ids)


def test_checkpoint_round_trip(tmp_path, stage1):
    _, res = stage1
    save_checkpoint(tmp_path / "c.ckpt", res.model, res.registry, {"note": 1})
    model, reg, meta = load_checkpoint(tmp_path / "c.ckpt")
    assert reg.identical_to(res.registry)
    assert meta["extra"] == {"note": 1}
    for k, v in res.model.state_dict().items():
        assert torch.equal(v, model.state_dict()[k])


def test_training_log(tmp_path, data):
    _, base = data
    path = tmp_path / "log.jsonl"
    train_stage1(base, SPLIT.base_ids, TrainConfig(iterations_stage1=3, batch_size=2), log_path=path)
    recs = [json.loads(x) for x in path.read_text().splitlines()]
    assert [r["iteration"] for r in recs] == [0, 1, 2]
    assert {"lr", "seed", "cls_loss", "total"} <= set(recs[0])
