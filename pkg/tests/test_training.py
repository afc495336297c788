import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dramnet.errors import ContractError, ParameterError, ShapeError
from dramnet.imaging import CROP_TAGS
from dramnet.model import ArchitectureSpec, LayerSpec, build_model, infer_shapes, model_bytes
from dramnet.presets import dramnet, presets
from dramnet.training import (
    ImageSet,
    TrainConfig,
    adam_step,
    augment_set,
    epoch_batches,
    image_set,
    init_state,
    lr_at,
    sgd_momentum_step,
    split_dataset,
    train,
)


def tiny(size=8):
    layers = [
        LayerSpec("conv2d", kernel=(3, 3), stride=1, units=4),
        LayerSpec("batchnorm"),
        LayerSpec("relu"),
        LayerSpec("pool", kernel=(2, 2), stride=2),
        LayerSpec("full", units=8),
        LayerSpec("batchnorm"),
        LayerSpec("relu"),
        LayerSpec("dropout", dropout_p=0.5),
        LayerSpec("full", units=3),
        LayerSpec("softmax"),
    ]
    return ArchitectureSpec("tiny", (size, size, 1), layers, 3)


def toy_set(n_per_class=4, size=8, seed=0):
    """Each class lights up a different third of the image."""
    rng = np.random.default_rng(seed)
    imgs, labels = [], []
    for c in range(3):
        for _ in range(n_per_class):
            img = rng.integers(0, 60, (size, size))
            img[:, c * size // 3 : (c + 1) * size // 3] += 180
            imgs.append(img)
            labels.append(c)
    return ImageSet(np.array(imgs, dtype=np.uint8), labels)


# --- config -----------------------------------------------------------------------------


def test_config_defaults():
    assert TrainConfig(optimizer="sgd").lr0 == 0.01
    assert TrainConfig(optimizer="adam").lr0 == 0.001
    c = TrainConfig()
    assert (c.batch_size, c.decay_rate, c.decay_period, c.split_ratio, c.input_size) == (16, 0.9, 500, 0.6, 64)
    assert (c.beta1, c.beta2, c.eps, c.momentum) == (0.9, 0.999, 1e-8, 0.9)


def test_config_round_trip():
    c = TrainConfig(optimizer="sgd_momentum", augment=True, epochs=3, seed=9)
    assert TrainConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c


@pytest.mark.parametrize("kw", [{"split_ratio": 0}, {"split_ratio": 1}, {"batch_size": 1}, {"optimizer": "rmsprop"}])
def test_config_validation(kw):
    with pytest.raises(ParameterError):
        TrainConfig(**kw)


def test_config_unknown_key():
    with pytest.raises(ParameterError):
        TrainConfig.from_dict({"learning_rate": 0.1})


# --- split --------------------------------------------------------------------------------


def test_split_counts():
    labels = np.repeat([0, 1, 2], 60)
    tr, te = split_dataset(labels, 0.6, 0)
    assert len(tr) == 108 and len(te) == 72
    assert np.bincount(labels[tr]).tolist() == [36, 36, 36]


@settings(max_examples=50)
@given(st.lists(st.integers(2, 30), min_size=2, max_size=5), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_is_a_stratified_partition(counts, ratio, seed):
    labels = np.concatenate([np.full(n, c) for c, n in enumerate(counts)])
    tr, te = split_dataset(labels, ratio, seed)
    assert np.intersect1d(tr, te).size == 0
    assert np.array_equal(np.sort(np.concatenate([tr, te])), np.arange(len(labels)))
    per_class = np.bincount(labels[tr], minlength=len(counts))
    assert len(set(per_class.tolist())) == 1 and per_class[0] >= 1
    t2, _ = split_dataset(labels, ratio, seed)
    assert np.array_equal(tr, t2)


def test_split_depends_on_seed():
    labels = np.repeat([0, 1, 2], 60)
    assert not np.array_equal(split_dataset(labels, 0.6, 0)[0], split_dataset(labels, 0.6, 1)[0])


@pytest.mark.parametrize("ratio", [0.0, 1.0, -0.5, 1.5])
def test_split_bad_ratio(ratio):
    with pytest.raises(ParameterError):
        split_dataset(np.repeat([0, 1], 5), ratio, 0)


def test_split_needs_two_per_class():
    with pytest.raises(ParameterError):
        split_dataset([0, 0, 1], 0.5, 0)


# --- batching -------------------------------------------------------------------------------


def test_augmented_epoch_batches():
    batches = epoch_batches(1080, 16, (0,))
    assert [len(b) for b in batches] == [16] * 67 + [8]


def test_unaugmented_epoch_batches():
    assert len(epoch_batches(180, 16, (0,))) == 12
    assert len(epoch_batches(108, 16, (0,))) == 7


def test_lone_leftover_joins_previous_batch():
    batches = epoch_batches(17, 16, (0,))
    assert [len(b) for b in batches] == [17]


@settings(max_examples=100)
@given(st.integers(2, 300), st.integers(2, 40), st.integers(0, 100))
def test_every_item_once_per_epoch(n, bs, seed):
    batches = epoch_batches(n, bs, (seed,))
    assert Counter(np.concatenate(batches).tolist()) == Counter(range(n))
    assert all(len(b) >= 2 for b in batches) or n < 2


# --- augmentation ---------------------------------------------------------------------------


def test_augmentation_multiplies_by_six(default_dataset):
    s = image_set(default_dataset.measurements, 64)
    aug = augment_set(s)
    assert len(aug) == 6 * len(s) == 1080
    assert aug.tags[:6] == CROP_TAGS
    assert np.array_equal(aug.images[5], s.images[0])
    assert np.array_equal(aug.labels[:6], [s.labels[0]] * 6)


def test_image_set_downscales_captures(small_dataset):
    s = image_set(small_dataset.measurements, 16)
    assert s.images.shape == (36, 16, 16) and s.images.dtype == np.uint8
    x = s.inputs()
    assert x.shape == (36, 16, 16, 1) and x.min() >= 0 and x.max() <= 1


# --- schedule -------------------------------------------------------------------------------


def test_lr_staircase():
    assert lr_at(0, 0.01) == 0.01
    assert lr_at(499, 0.01) == 0.01
    assert lr_at(500, 0.01) == pytest.approx(0.009, rel=1e-15)
    assert lr_at(1000, 0.01) == pytest.approx(0.0081, rel=1e-15)
    with pytest.raises(ParameterError):
        lr_at(-1, 0.01)


@given(st.integers(0, 10**5), st.integers(0, 10**5))
def test_lr_non_increasing_and_piecewise_constant(a, b):
    a, b = sorted((a, b))
    assert lr_at(b, 0.01) <= lr_at(a, 0.01)
    if a // 500 == b // 500:
        assert lr_at(a, 0.01) == lr_at(b, 0.01)


# --- optimizers -------------------------------------------------------------------------------


def test_sgd_zero_gradient_is_a_no_op():
    p = [np.array([1.0, -2.0])]
    state = init_state("sgd_momentum", p)
    sgd_momentum_step(p, [np.zeros(2)], state, 0.01)
    assert p[0].tolist() == [1.0, -2.0] and state.t == 1


def test_sgd_first_and_second_step():
    g = np.array([0.5, -1.0])
    p = [np.zeros(2)]
    state = init_state("sgd_momentum", p)
    sgd_momentum_step(p, [g], state, 0.01, 0.9)
    np.testing.assert_allclose(p[0], -0.01 * g, rtol=1e-15)
    sgd_momentum_step(p, [g], state, 0.01, 0.9)
    # v2 = 0.9 g + g, so the total is lr * g * 2.9
    np.testing.assert_allclose(p[0], -0.01 * g * 2.9, rtol=1e-14)
    assert state.t == 2


def test_sgd_weight_decay_shrinks_norm():
    rng = np.random.default_rng(0)
    p = [rng.standard_normal(20)]
    before = float(np.sum(p[0] ** 2))
    state = init_state("sgd_momentum", p)
    sgd_momentum_step(p, [np.zeros(20)], state, 0.01, decay=[2 * 1e-2])
    assert float(np.sum(p[0] ** 2)) < before


def test_adam_zero_gradient_is_a_no_op():
    p = [np.array([3.0])]
    state = init_state("adam", p)
    adam_step(p, [np.zeros(1)], state, 0.001)
    assert p[0].tolist() == [3.0]


def test_adam_first_step_size():
    p = [np.array([0.0])]
    state = init_state("adam", p)
    adam_step(p, [np.array([1.0])], state, 0.001)
    assert p[0][0] == pytest.approx(-0.001 / (1 + 1e-8), abs=1e-15)
    assert abs(p[0][0] + 0.001) < 1e-6


@given(st.lists(st.floats(-100, 100).filter(lambda v: abs(v) > 1e-3), min_size=1, max_size=20))
def test_adam_first_step_follows_gradient_sign(gs):
    g = np.array(gs)
    p = [np.zeros_like(g)]
    adam_step(p, [g], init_state("adam", p), 0.001)
    assert np.array_equal(np.sign(p[0]), -np.sign(g))


def test_float32_kernels_match_float64_reference():
    rng = np.random.default_rng(3)
    g = rng.standard_normal(1000).astype(np.float32)
    p32 = [rng.standard_normal(1000).astype(np.float32)]
    p64 = [p32[0].astype(np.float64)]
    s32, s64 = init_state("adam", p32), init_state("adam", p64)
    for _ in range(3):
        adam_step(p32, [g], s32, 0.01, decay=[2e-4])
        adam_step(p64, [g.astype(np.float64)], s64, 0.01, decay=[2e-4])
    np.testing.assert_allclose(p32[0], p64[0], rtol=1e-5, atol=1e-6)


def test_optimizer_shape_checks():
    p = [np.zeros(3)]
    with pytest.raises(ShapeError):
        sgd_momentum_step(p, [np.zeros(4)], init_state("sgd_momentum", p), 0.01)
    with pytest.raises(ShapeError):
        adam_step(p, [np.zeros(3), np.zeros(3)], init_state("adam", p), 0.01)


# --- training loop -----------------------------------------------------------------------------


def test_zero_epochs_returns_identical_model():
    model = build_model(tiny(), 0)
    trained, hist = train(model, toy_set(), None, TrainConfig(epochs=0, batch_size=4))
    assert model_bytes(trained) == model_bytes(model)
    assert hist.losses == []


def test_train_leaves_argument_untouched():
    model = build_model(tiny(), 0)
    before = model_bytes(model)
    train(model, toy_set(), None, TrainConfig(epochs=1, batch_size=4))
    assert model_bytes(model) == before


def test_training_contract_errors():
    model = build_model(tiny(), 0)
    with pytest.raises(ContractError):
        train(model, toy_set().subset([]), None, TrainConfig(epochs=1, batch_size=4))
    with pytest.raises(ContractError):
        train(model, toy_set(), None, TrainConfig(epochs=1, batch_size=16))
    with pytest.raises(ContractError):
        train(model, toy_set(size=9), None, TrainConfig(epochs=1, batch_size=4))


@pytest.mark.parametrize("optimizer", ["sgd", "adam"])
def test_history_lengths_and_learning(optimizer):
    data = toy_set(6)
    model = build_model(tiny(), 1)
    cfg = TrainConfig(optimizer=optimizer, epochs=15, batch_size=4, l2=1e-4, seed=3)
    trained, hist = train(model, data, data, cfg)
    assert hist.batches_per_epoch == 5  # 18 images: 4+4+4+4+2
    assert len(hist.losses) == 15 * 5 == len(hist.steps) == len(hist.lrs)
    assert len(hist.train_acc) == len(hist.test_acc) == 15
    assert np.mean(hist.losses[-5:]) < np.mean(hist.losses[:5])
    assert hist.test_acc[-1] == 1.0
    assert hist.wall_time > 0


def test_augmentation_changes_only_the_training_multiset():
    data = toy_set(2)
    model = build_model(tiny(), 1)
    _, plain = train(model, data, data, TrainConfig(epochs=1, batch_size=4))
    _, aug = train(model, data, data, TrainConfig(epochs=1, batch_size=4, augment=True))
    assert plain.train_size == 6 and aug.train_size == 36
    assert len(data) == 6


def test_training_is_deterministic_in_float64():
    data = toy_set(3)
    model = build_model(tiny(), 2, np.float64)
    cfg = TrainConfig(epochs=3, batch_size=3, seed=5)
    m1, h1 = train(model, data, data, cfg)
    m2, h2 = train(model, data, data, cfg)
    assert h1.losses == h2.losses
    assert model_bytes(m1) == model_bytes(m2)
    _, h3 = train(model, data, data, TrainConfig(epochs=3, batch_size=3, seed=6))
    assert h3.losses != h1.losses


def test_history_csv(tmp_path):
    data = toy_set(2)
    _, hist = train(build_model(tiny(), 0), data, data, TrainConfig(epochs=2, batch_size=3))
    hist.to_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "step,lr,loss,epoch,train_acc,test_acc"
    assert len(lines) == 1 + len(hist.losses)


def test_presets_are_valid():
    p = presets()
    assert set(p) == {"dramnet_full", "dramnet_desk", "alexnet_s", "vggnet_s"}
    for arch in p.values():
        infer_shapes(arch)
        assert arch.n_classes == 3
    assert len(p["dramnet_full"].groups) == 10
    assert p["dramnet_desk"].layers == p["dramnet_full"].layers


@pytest.mark.slow
def test_desk_network_overfits_a_tiny_set(small_dataset):
    s = image_set(small_dataset.measurements, 64)
    idx = np.concatenate([np.flatnonzero(s.labels == c)[:4] for c in range(3)])
    tiny_set = s.subset(idx)
    model = build_model(dramnet(64), 0)
    trained, _ = train(model, tiny_set, None, TrainConfig(epochs=200, batch_size=4, seed=0))
    probs = trained.predict_proba(tiny_set.inputs())
    assert np.mean(np.argmax(probs, axis=1) == tiny_set.labels) == 1.0
