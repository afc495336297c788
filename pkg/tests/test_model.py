import json

import numpy as np
import pytest

from dramnet import layers as L
from dramnet.errors import FormatError, ShapeError
from dramnet.model import (
    OUTPUT_GAIN,
    ArchitectureSpec,
    LayerSpec,
    build_model,
    infer_shapes,
    model_bytes,
    parse_model,
    save_model,
    load_model,
)
from dramnet.presets import TABLE1_INPUT_SIZES, TABLE1_DEVIATIONS, alexnet_s, dramnet, get_architecture, presets, vggnet_s
from gradcheck import max_rel_error, numeric_grad


def tiny(n_classes=3, size=6):
    layers = [
        LayerSpec("conv2d", kernel=(3, 3), stride=1, units=2),
        LayerSpec("batchnorm"),
        LayerSpec("relu"),
        LayerSpec("pool", kernel=(2, 2), stride=2),
        LayerSpec("full", units=4),
        LayerSpec("batchnorm"),
        LayerSpec("relu"),
        LayerSpec("full", units=n_classes),
        LayerSpec("softmax"),
    ]
    return ArchitectureSpec("tiny", (size, size, 1), layers, n_classes)


def test_full_scale_table_rows():
    inputs = infer_shapes(dramnet(1024)).group_inputs()
    for group in ("Layer1", "Layer2", "Layer3", "Layer4", "Layer6", "Layer8", "Layer9", "Layer10"):
        assert inputs[group] == TABLE1_INPUT_SIZES[group], group
    assert set(TABLE1_DEVIATIONS) == {"Layer5", "Layer7"}
    assert inputs["Layer5"] == (512, 512, 128)
    assert inputs["Layer7"] == (256, 256, 192)


def test_first_conv_output_at_full_scale():
    row = infer_shapes(dramnet(1024)).rows[0]
    assert row.output_shape == (1024, 1024, 3)


def test_full_scale_dense_is_symbolic_only():
    table = infer_shapes(dramnet(1024))
    layer8 = next(r for r in table.rows if r.group == "Layer8" and r.kind == "full")
    assert layer8.params == 128 * 128 * 192 * 2048 + 2048


def test_desk_flatten_length():
    table = infer_shapes(dramnet(64))
    assert table.group_inputs()["Layer8"] == (8, 8, 192)
    layer8 = next(r for r in table.rows if r.group == "Layer8" and r.kind == "full")
    assert layer8.params == 12288 * 2048 + 2048


def test_non_positive_shape_names_the_layer():
    arch = ArchitectureSpec("bad", (2, 2, 1), (LayerSpec("pool", kernel=(2, 2), stride=2),
                                               LayerSpec("pool", kernel=(2, 2), stride=2),
                                               LayerSpec("full", units=3), LayerSpec("softmax")), 3)
    with pytest.raises(ShapeError, match="layer 1"):
        infer_shapes(arch)


def test_architecture_must_end_in_classifier():
    with pytest.raises(ShapeError):
        ArchitectureSpec("x", (4, 4, 1), (LayerSpec("full", units=3),), 3)
    with pytest.raises(ShapeError):
        ArchitectureSpec("x", (4, 4, 1), (LayerSpec("full", units=2), LayerSpec("softmax")), 3)


def test_layer_spec_validation():
    with pytest.raises(ShapeError):
        LayerSpec("conv2d", units=3)
    with pytest.raises(ShapeError):
        LayerSpec("relu", kernel=(2, 2), stride=1)
    with pytest.raises(ShapeError):
        LayerSpec("dropout", dropout_p=1.0)
    with pytest.raises(ShapeError):
        LayerSpec("lstm")


def test_architecture_dict_round_trip():
    for arch in presets().values():
        assert ArchitectureSpec.from_dict(json.loads(json.dumps(arch.to_dict()))) == arch


@pytest.mark.parametrize("arch", [dramnet(64), alexnet_s(64), vggnet_s(64), tiny()], ids=lambda a: a.name)
def test_inferred_shapes_match_forward_pass(arch):
    model = build_model(arch, 0)
    x = np.random.default_rng(0).random((2, *arch.input_shape), dtype=np.float32)
    table = infer_shapes(arch)
    for layer, row in zip(model.layers, table.rows):
        assert x.shape[1:] == row.input_shape
        x = layer.forward(x, False, None)
        assert x.shape[1:] == row.output_shape
    assert table.total_params == model.n_params()


def test_desk_parameter_count():
    model = build_model(dramnet(64), 0)
    assert model.n_params() == infer_shapes(dramnet(64)).total_params == 29_676_391


def test_initialisation_is_seeded():
    a, b, c = build_model(tiny(), 3), build_model(tiny(), 3), build_model(tiny(), 4)
    assert model_bytes(a) == model_bytes(b) != model_bytes(c)


def test_initial_values():
    model = build_model(tiny(), 1, np.float64)
    conv, dense_out = model.layers[0], model.layers[7]
    limit = np.sqrt(6 / 9)
    assert np.all(np.abs(conv.params["weight"]) <= limit)
    assert np.all(conv.params["bias"] == 0)
    assert np.all(np.abs(dense_out.params["weight"]) <= OUTPUT_GAIN * np.sqrt(6 / 4))
    bn = model.layers[1]
    assert np.all(bn.params["gamma"] == 1) and np.all(bn.params["beta"] == 0)
    assert np.all(bn.state["running_mean"] == 0) and np.all(bn.state["running_var"] == 1)


def test_initial_loss_is_near_ln3(small_dataset):
    from dramnet.training import image_set

    model = build_model(dramnet(64), 0)
    s = image_set(small_dataset.measurements, 64)
    x = s.inputs()
    for training in (False, True):
        probs = model.forward(x, training=training, key=(0,))
        assert abs(L.loss(probs, s.labels) - np.log(3)) < 0.05


def test_regularised_weights_are_conv_and_dense_only():
    model = build_model(tiny(), 0)
    ws = model.regularized_weights()
    assert len(ws) == 3
    assert all(w.ndim in (2, 4) for w in ws)


def test_whole_model_gradient():
    model = build_model(tiny(), 5, np.float64)
    rng = np.random.default_rng(5)
    x = rng.standard_normal((4, 6, 6, 1))
    y = np.array([0, 1, 2, 1])

    def f():
        return L.cross_entropy(model.forward(x, training=True, key=(1,)), y)

    probs = model.forward(x, training=True, key=(1,))
    model.backward(L.loss_grad_logits(probs, y))
    for layer, name in model.trainable():
        analytic = layer.grads[name].copy()
        # each evaluation also nudges running statistics, which training-mode outputs ignore
        assert max_rel_error(analytic, numeric_grad(f, layer.params[name])) < 1e-4, (layer.kind, name)


def test_serialisation_round_trip(tmp_path):
    model = build_model(tiny(), 2)
    probs = model.forward(np.ones((3, 6, 6, 1), np.float32), training=True, key=(0,))  # moves running stats
    save_model(model, tmp_path / "m.drnw")
    back = load_model(tmp_path / "m.drnw")
    assert model_bytes(back) == model_bytes(model)
    x = np.random.default_rng(1).random((5, 6, 6, 1), dtype=np.float32)
    assert np.array_equal(back.forward(x), model.forward(x))
    assert probs.shape == (3, 3)


def test_model_file_layout():
    data = model_bytes(build_model(tiny(), 2))
    assert data[:4] == b"DRNW" and data[4] == 1
    n = int.from_bytes(data[5:9], "little")
    meta = json.loads(data[9 : 9 + n])
    assert meta["architecture"]["name"] == "tiny"
    # first array: 3x3x1x2 conv weights, count-prefixed
    assert int.from_bytes(data[9 + n : 17 + n], "little") == 18


@pytest.mark.parametrize("mangle", [lambda d: b"XXXX" + d[4:], lambda d: d[:4] + b"\x09" + d[5:], lambda d: d[:-4], lambda d: d[:7],
                                    lambda d: d + b"\0\0\0\0"])
def test_model_format_errors(mangle):
    with pytest.raises(FormatError):
        parse_model(mangle(model_bytes(build_model(tiny(), 2))))


def test_get_architecture():
    assert get_architecture("alexnet-s").name == "alexnet_s"
    assert get_architecture("dramnet", 1024).name == "dramnet_full"
    with pytest.raises(KeyError):
        get_architecture("resnet")
