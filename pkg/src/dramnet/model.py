"""Architecture descriptions, symbolic shape inference, model construction and the DRNW file format."""

from __future__ import annotations

import copy
import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import layers as L
from . import rng
from .errors import FormatError, ShapeError

KINDS = ("conv2d", "pool", "batchnorm", "relu", "dropout", "full", "softmax")

MODEL_MAGIC = b"DRNW"
MODEL_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: tuple[int, int] | None = None
    stride: int | None = None
    units: int | None = None  # output channels for conv2d, output units for full
    dropout_p: float = 0.0
    group: str | None = None  # row label in the printed architecture table

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        windowed = self.kind in ("conv2d", "pool")
        if windowed != (self.kernel is not None) or windowed != (self.stride is not None):
            raise ShapeError(f"kernel/stride must be given exactly for conv2d and pool layers ({self.kind})")
        if self.kernel is not None:
            object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
            if min(self.kernel) < 1 or self.stride < 1:
                raise ShapeError("kernel and stride must be positive")
        if self.kind in ("conv2d", "full") and (self.units is None or self.units < 1):
            raise ShapeError(f"{self.kind} needs a positive unit count")
        if not 0 <= self.dropout_p < 1:
            raise ShapeError("dropout probability must be in [0, 1)")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None and not (k == "dropout_p" and v == 0.0)}

    @classmethod
    def from_dict(cls, d: dict) -> LayerSpec:
        return cls(**d)


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    n_classes: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.layers) < 2 or self.layers[-1].kind != "softmax" or self.layers[-2].kind != "full":
            raise ShapeError("architecture must end with a full layer followed by softmax")
        if self.layers[-2].units != self.n_classes:
            raise ShapeError(f"output layer has {self.layers[-2].units} units for {self.n_classes} classes")

    @property
    def groups(self) -> list[str]:
        seen = []
        for spec in self.layers:
            if spec.group and spec.group not in seen:
                seen.append(spec.group)
        return seen

    def with_input(self, size: int) -> ArchitectureSpec:
        return ArchitectureSpec(self.name, (size, size, self.input_shape[2]), self.layers, self.n_classes)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "n_classes": self.n_classes,
            "layers": [s.to_dict() for s in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> ArchitectureSpec:
        return cls(d["name"], tuple(d["input_shape"]), tuple(LayerSpec.from_dict(s) for s in d["layers"]), d["n_classes"])


@dataclass(frozen=True)
class ShapeRow:
    index: int
    group: str | None
    kind: str
    input_shape: tuple[int, ...]
    output_shape: tuple[int, ...]
    params: int


@dataclass(frozen=True)
class ShapeTable:
    arch: str
    rows: tuple[ShapeRow, ...]

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    def group_inputs(self) -> dict[str, tuple[int, ...]]:
        """Input shape of the first layer of every named group."""
        out = {}
        for r in self.rows:
            if r.group and r.group not in out:
                out[r.group] = r.input_shape
        return out

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.rows[-1].output_shape


def format_shape(shape) -> str:
    return " x ".join(str(d) for d in shape)


def _param_count(spec: LayerSpec, in_shape) -> int:
    if spec.kind == "conv2d":
        kh, kw = spec.kernel
        return kh * kw * in_shape[-1] * spec.units + spec.units
    if spec.kind == "full":
        return int(np.prod(in_shape)) * spec.units + spec.units
    if spec.kind == "batchnorm":
        return 2 * in_shape[-1]
    return 0


def infer_shapes(arch: ArchitectureSpec, input_shape=None) -> ShapeTable:
    """Per-layer input/output shapes and trainable parameter counts, without allocating anything."""
    shape = tuple(input_shape or arch.input_shape)
    rows = []
    for i, spec in enumerate(arch.layers):
        label = f"layer {i} ({spec.group or spec.kind})"
        if spec.kind in ("conv2d", "pool"):
            if len(shape) != 3:
                raise ShapeError(f"{label}: {spec.kind} needs a spatial input, got {format_shape(shape)}")
            h, w, c = shape
            if spec.kind == "conv2d":
                ho, wo = L.conv_output_size(h, w, spec.kernel, spec.stride)
                out = (ho, wo, spec.units)
            else:
                ho, wo = L.pool_output_size(h, w, spec.kernel, spec.stride)
                out = (ho, wo, c)
        elif spec.kind == "full":
            out = (spec.units,)
        else:
            out = shape
        if min(out) < 1:
            raise ShapeError(f"{label}: non-positive inferred shape {out}")
        rows.append(ShapeRow(i, spec.group, spec.kind, shape, out, _param_count(spec, shape)))
        shape = out
    return ShapeTable(arch.name, tuple(rows))


# --- models -------------------------------------------------------------------------


class Model:
    """A built network: one layer object per LayerSpec, ending in softmax."""

    def __init__(self, arch: ArchitectureSpec, layers: list, init_seed: int, dtype=np.float32):
        self.arch = arch
        self.layers = layers
        self.init_seed = init_seed
        self.dtype = np.dtype(dtype)
        for layer in layers:
            layer.need_input_grad = True
        layers[0].need_input_grad = False

    def logits(self, x, training=False, key=None):
        x = np.asarray(x, dtype=self.dtype)
        for i, layer in enumerate(self.layers[:-1]):
            x = layer.forward(x, training, None if key is None else (*key, i))
        return x

    def forward(self, x, training=False, key=None):
        return self.layers[-1].forward(self.logits(x, training, key), training)

    def backward(self, dlogits):
        """Backpropagate a gradient taken at the logits (softmax already folded in)."""
        g = dlogits
        for layer in reversed(self.layers[:-1]):
            g = layer.backward(g)
        return g

    def predict_proba(self, x, batch_size: int = 64):
        out = [self.forward(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0)

    def trainable(self):
        """(layer, parameter name) pairs in spec order."""
        return [(layer, name) for layer in self.layers for name in layer.params]

    def regularized_weights(self):
        return [layer.params[name] for layer in self.layers for name in layer.regularized]

    def n_params(self) -> int:
        return sum(layer.params[name].size for layer, name in self.trainable())

    def copy(self) -> Model:
        return copy.deepcopy(self)


def _he_uniform(key, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    u = rng.uniforms(key, int(np.prod(shape)))
    return ((2.0 * u - 1.0) * limit).reshape(shape).astype(dtype)


# Logit-layer gain: keeps the untrained softmax close to uniform.
OUTPUT_GAIN = 0.01


def build_model(arch: ArchitectureSpec, init_seed: int, dtype=np.float32) -> Model:
    table = infer_shapes(arch)
    built = []
    last = len(arch.layers) - 2
    for i, (spec, row) in enumerate(zip(arch.layers, table.rows)):
        key = (init_seed, rng.INIT, i)
        if spec.kind == "conv2d":
            kh, kw = spec.kernel
            cin = row.input_shape[-1]
            w = _he_uniform(key, (kh, kw, cin, spec.units), kh * kw * cin, dtype)
            built.append(L.Conv2D(w, np.zeros(spec.units, dtype), spec.stride))
        elif spec.kind == "full":
            fan_in = int(np.prod(row.input_shape))
            w = _he_uniform(key, (fan_in, spec.units), fan_in, dtype)
            if i == last:
                w *= OUTPUT_GAIN
            built.append(L.Dense(w, np.zeros(spec.units, dtype)))
        elif spec.kind == "pool":
            built.append(L.MaxPool(spec.kernel, spec.stride))
        elif spec.kind == "batchnorm":
            c = row.input_shape[-1]
            built.append(L.BatchNorm(np.ones(c, dtype), np.zeros(c, dtype), np.zeros(c, dtype), np.ones(c, dtype)))
        elif spec.kind == "relu":
            built.append(L.ReLU())
        elif spec.kind == "dropout":
            built.append(L.Dropout(spec.dropout_p))
        else:
            built.append(L.Softmax())
    return Model(arch, built, init_seed, dtype)


# --- DRNW model files -------------------------------------------------------------------

_ARRAY_ORDER = {"conv2d": ("weight", "bias"), "full": ("weight", "bias"), "batchnorm": ("gamma", "beta", "running_mean", "running_var")}


def _layer_arrays(layer):
    return [{**layer.params, **layer.state}[name] for name in _ARRAY_ORDER.get(layer.kind, ())]


def model_bytes(model: Model) -> bytes:
    header = json.dumps({"architecture": model.arch.to_dict(), "init_seed": model.init_seed}, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<BI", MODEL_VERSION, len(header)))
    buf.write(header)
    for layer in model.layers:
        for a in _layer_arrays(layer):
            buf.write(struct.pack("<Q", a.size))
            buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return buf.getvalue()


def save_model(model: Model, path) -> None:
    Path(path).write_bytes(model_bytes(model))


def parse_model(data: bytes) -> Model:
    if data[:4] != MODEL_MAGIC:
        raise FormatError(f"bad model magic {data[:4]!r}")
    if len(data) < 9:
        raise FormatError("truncated model header")
    version, n = struct.unpack_from("<BI", data, 4)
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version}")
    pos = 9
    meta = json.loads(data[pos : pos + n].decode("utf-8"))
    pos += n
    arch = ArchitectureSpec.from_dict(meta["architecture"])
    model = build_model(arch, meta["init_seed"], np.float32)
    for layer in model.layers:
        for a in _layer_arrays(layer):
            if pos + 8 > len(data):
                raise FormatError("model file is truncated")
            (count,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            if count != a.size or pos + 4 * count > len(data):
                raise FormatError(f"array of {count} values where {a.size} were expected, or file truncated")
            a[...] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(a.shape)
            pos += 4 * count
    if pos != len(data):
        raise FormatError("trailing bytes after model arrays")
    return model


def load_model(path) -> Model:
    return parse_model(Path(path).read_bytes())
