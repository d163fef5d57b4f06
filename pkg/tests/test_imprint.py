from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from imtfa.imprint import (
    IMPRINTED,
    TRAINED,
    ClassifierHead,
    ClassRegistry,
    RegistryError,
    ZeroNormError,
    append_column,
    classify,
    cosine_scores,
    imprint_class,
    initial_registry,
    load_registry,
    merge_shot_embeddings,
    remove_class,
    save_registry,
    shot_embeddings,
)
from imtfa.model import build_model
from imtfa.shapesdata import ClassSplit, ShotSet, generate_dataset, sample_shots

SPLIT = ClassSplit.first_n(6, 3)


def _oracle(z, w, alpha):
    z = np.asarray(z, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    out = np.zeros((z.shape[0], w.shape[1]))
    for i in range(z.shape[0]):
        for j in range(w.shape[1]):
            a = z[i] / np.sqrt(np.sum(z[i] ** 2))
            b = w[:, j] / np.sqrt(np.sum(w[:, j] ** 2))
            out[i, j] = alpha * float(np.sum(a * b))
    return out


@pytest.fixture(scope="module")
def toy():
    ds = generate_dataset(30, SPLIT, seed=2, image_size=64)
    model = build_model(seed=0)
    model.eval()
    return ds, model


def test_cosine_identities():
    w = np.array([[1.0, 0.0], [2.0, 3.0], [0.0, 1.0]])
    s = cosine_scores(np.array([[1.0, 2.0, 0.0]]), w, 1.0)
    assert s[0, 0].item() == pytest.approx(1.0)
    z = np.array([[0.0, 0.0, 1.0], [-1.0, -2.0, 0.0]])
    s = cosine_scores(z, np.array([[1.0], [0.0], [0.0]]) * 1, 1.0)
    assert s[0, 0].item() == 0.0
    s = cosine_scores(z, w, 7.0)
    assert s[1, 0].item() == pytest.approx(-7.0)


def test_cosine_random_case_matches_oracle():
    rng = np.random.default_rng(3)
    z, w = rng.normal(size=(3, 5)), rng.normal(size=(5, 4))
    assert np.allclose(cosine_scores(z, w, 2.5).numpy(), _oracle(z, w, 2.5), atol=1e-6)


finite = st.floats(-10, 10, allow_nan=False).filter(lambda v: abs(v) > 1e-3)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (4, 6), elements=finite), arrays(np.float64, (6, 3), elements=finite),
       st.floats(0.1, 50))
def test_cosine_bounded_and_scale_free(z, w, alpha):
    s = cosine_scores(z, w, alpha).numpy()
    assert np.all(np.abs(s) <= alpha * (1 + 1e-12))
    assert np.allclose(cosine_scores(3.0 * z, 0.5 * w, alpha).numpy(), s, atol=1e-9)


def test_zero_norm_errors_name_the_offender():
    with pytest.raises(ZeroNormError, match="row 1"):
        cosine_scores(np.array([[1.0, 0.0], [0.0, 0.0]]), np.eye(2))
    with pytest.raises(ZeroNormError, match="column 0"):
        cosine_scores(np.ones((1, 2)), np.array([[0.0, 1.0], [0.0, 1.0]]))


def test_classify_properties():
    probs, arg = classify(torch.zeros(2, 4))
    assert torch.allclose(probs, torch.full((2, 4), 0.25))
    s = torch.randn(6, 5, dtype=torch.float64)
    probs, arg = classify(s)
    assert torch.allclose(probs.sum(1), torch.ones(6, dtype=torch.float64), atol=1e-6)
    for a in (0.3, 1.0, 20.0):
        assert torch.equal(classify(a * s)[1], arg)


def test_merge_examples():
    assert np.allclose(merge_shot_embeddings(np.array([[3.0, 4.0]])), [0.6, 0.8])
    m = merge_shot_embeddings(np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert np.allclose(m, [0.5, 0.5])
    assert np.linalg.norm(m) == pytest.approx(np.sqrt(0.5))


def test_merge_permutation_and_scale_invariant():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(10, 16))
    ids = np.arange(10)
    ref = merge_shot_embeddings(z, ids)
    for _ in range(20):
        p = rng.permutation(10)
        scale = rng.uniform(0.01, 100, size=(10, 1))
        assert np.allclose(merge_shot_embeddings(z[p] * scale[p], ids[p]), ref, atol=1e-6)
        # summing in instance-id order makes the permuted result bit-identical
        assert merge_shot_embeddings(z[p], ids[p]).tobytes() == ref.tobytes()


def test_merge_rejects_zero_shot():
    with pytest.raises(ZeroNormError):
        merge_shot_embeddings(np.array([[1.0, 1.0], [0.0, 0.0]]))


def _registry(c=4, e=8, seed=0):
    return initial_registry(e, list(range(1, c)), 10.0, seed=seed)


def test_append_is_bit_exact_for_existing_columns():
    reg = _registry()
    z = torch.randn(20, 8)
    before = cosine_scores(z, reg)
    grown = append_column(reg, 9, np.random.default_rng(1).normal(size=8))
    after = cosine_scores(z, grown)
    assert grown.num_columns == reg.num_columns + 1
    assert grown.weights[:, :-1].tobytes() == reg.weights.tobytes()
    assert torch.equal(after[:, :-1], before)
    assert grown.origins[-1] == IMPRINTED


def test_remove_restores_original():
    reg = _registry()
    grown = append_column(reg, 9, np.ones(8))
    assert remove_class(grown, 9).identical_to(reg)
    with pytest.raises(RegistryError):
        remove_class(reg, 42)
    with pytest.raises(RegistryError, match="trained"):
        remove_class(reg, 1)
    with pytest.raises(RegistryError, match="background"):
        remove_class(reg, 0)


def test_remove_middle_keeps_order():
    reg = _registry()
    rng = np.random.default_rng(5)
    for cid in (7, 8, 9):
        reg = append_column(reg, cid, rng.normal(size=8))
    cols = {c: reg.weights[:, reg.column(c)].copy() for c in (7, 9)}
    out = remove_class(reg, 8)
    assert out.class_ids[-2:] == (7, 9)
    for c in (7, 9):
        assert out.weights[:, out.column(c)].tobytes() == cols[c].tobytes()


def test_duplicate_or_wrong_dim_rejected():
    reg = _registry()
    with pytest.raises(RegistryError):
        append_column(reg, 1, np.ones(8))
    with pytest.raises(RegistryError, match="dimension"):
        append_column(reg, 9, np.ones(5))


def test_registry_round_trip(tmp_path):
    reg = append_column(_registry(), 11, np.arange(1, 9, dtype=np.float64))
    save_registry(reg, tmp_path / "r.bin")
    back = load_registry(tmp_path / "r.bin", embedding_dim=8)
    assert back.identical_to(reg)
    with pytest.raises(RegistryError, match="embedding_dim"):
        load_registry(tmp_path / "r.bin", embedding_dim=16)


def test_restrict_keeps_background():
    reg = append_column(_registry(), 11, np.ones(8))
    sub = reg.restrict([2, 11])
    assert sub.class_ids == (0, 2, 11) and sub.background_index == 0
    assert sub.weights[:, 1].tobytes() == reg.weights[:, 2].tobytes()


def test_imprint_single_shot_scores_alpha(toy):
    ds, model = toy
    shots = sample_shots(ds.manifest, [7], 1, seed=0)[0]
    reg = imprint_class(_registry(7, 128), 7, shots, model, ds.images)
    z = shot_embeddings(model, shots, ds.images)
    s = cosine_scores(z, reg)[0, reg.column(7)].item()
    assert s == pytest.approx(reg.alpha, abs=1e-5)
    assert reg.origins[reg.column(7)] == IMPRINTED


def test_imprint_same_shots_twice_gives_same_column(toy):
    ds, model = toy
    shots = sample_shots(ds.manifest, [8], 3, seed=4)[0]
    reg = imprint_class(_registry(7, 128), 8, shots, model, ds.images)
    reg = imprint_class(reg, 9, shots, model, ds.images)
    assert reg.weights[:, -1].tobytes() == reg.weights[:, -2].tobytes()


def test_imprint_does_not_read_masks(toy):
    ds, model = toy
    shots = sample_shots(ds.manifest, [7], 2, seed=1)[0]
    blind = ShotSet(7, tuple(replace(s, annotation=replace(s.annotation, mask=None)) for s in shots.shots), 1)
    base = _registry(7, 128)
    assert imprint_class(base, 7, shots, model, ds.images).identical_to(imprint_class(base, 7, blind, model, ds.images))


def test_imprint_leaves_model_untouched(toy):
    ds, model = toy
    before = {k: v.clone() for k, v in model.state_dict().items()}
    imprint_class(_registry(7, 128), 7, sample_shots(ds.manifest, [7], 5, 0)[0], model, ds.images)
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())


def test_precomputed_registry_gives_identical_scores(tmp_path, toy):
    ds, model = toy
    reg = imprint_class(_registry(7, 128), 8, sample_shots(ds.manifest, [8], 2, seed=0)[0], model, ds.images)
    save_registry(reg, tmp_path / "r.bin")
    z = torch.randn(10, 128)
    a = cosine_scores(z, load_registry(tmp_path / "r.bin"))
    b = cosine_scores(z, load_registry(tmp_path / "r.bin"))
    assert torch.equal(a, b) and torch.equal(a, cosine_scores(z, reg))


def test_cosine_cross_entropy_gradients():
    torch.manual_seed(0)
    for _ in range(5):
        z = torch.randn(4, 8, dtype=torch.float64, requires_grad=True)
        w = torch.randn(8, 5, dtype=torch.float64, requires_grad=True)
        y = torch.randint(0, 5, (4,))
        fn = lambda z, w: torch.nn.functional.cross_entropy(cosine_scores(z, w, 10.0), y)
        assert torch.autograd.gradcheck(fn, (z, w), eps=1e-6, atol=1e-6, rtol=1e-3)


def test_classifier_head_round_trip():
    reg = _registry(5, 16)
    head = ClassifierHead(reg)
    assert head.to_registry().identical_to(reg)
    z = torch.randn(3, 16)
    assert torch.equal(head(z), cosine_scores(z, reg))


def test_registry_validation():
    with pytest.raises(RegistryError):
        ClassRegistry(np.ones((4, 2)), 1.0, (0, 1), (TRAINED,), 0)
    with pytest.raises(RegistryError):
        ClassRegistry(np.ones((4, 1)), 0.0, (0,), (TRAINED,), 0)
    with pytest.raises(RegistryError):
        ClassRegistry(np.ones((4, 1)), 1.0, (0,), (IMPRINTED,), 0)
