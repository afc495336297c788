"""Synthetic DRAM power-up fingerprints.

Each simulated chip carries a latent per-cell probability of powering up
charged (``bias``), a per-cell sensitivity to operating conditions, and a
true-cell / anti-cell polarity map.  Operating conditions move the bias in
logit space; a capture draws one Bernoulli bit per cell from a keyed stream,
so every measurement can be regenerated exactly from its seeds.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import rng
from .errors import DimensionError, FormatError, ParameterError

_CLAMP = 1e-9

BIN_MAGIC = b"DRNF"
BIN_VERSION = 1
_BIN_HEADER = struct.Struct("<4sBII3x")  # 16 bytes


class ConditionKind(str, enum.Enum):
    NOMINAL = "nominal"
    HIGH_TEMP = "high_temp"
    LOW_TEMP = "low_temp"
    HIGH_VOLT = "high_volt"
    LOW_VOLT = "low_volt"
    AGED = "aged"

    @property
    def index(self) -> int:
        return list(ConditionKind).index(self)


@dataclass(frozen=True)
class Condition:
    kind: ConditionKind
    magnitude: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ConditionKind(self.kind))
        if not self.magnitude >= 0:
            raise ParameterError(f"condition magnitude must be >= 0, got {self.magnitude}")

    @property
    def tag(self) -> str:
        if self.magnitude == 1.0:
            return self.kind.value
        return f"{self.kind.value}@{self.magnitude!r}"

    @classmethod
    def parse(cls, tag: str) -> Condition:
        name, _, mag = tag.strip().partition("@")
        try:
            kind = ConditionKind(name.lower().replace("-", "_"))
        except ValueError:
            raise ParameterError(f"unknown condition {tag!r}") from None
        return cls(kind, float(mag) if mag else 1.0)


ALL_CONDITIONS = tuple(Condition(k) for k in ConditionKind)


def _default_shift():
    return {"high_temp": 0.5, "low_temp": -0.5, "high_volt": 0.3, "low_volt": -0.3, "aged": 0.0}


def _default_coupling():
    return {"high_temp": 1.0, "low_temp": 1.0, "high_volt": 0.5, "low_volt": 0.5, "aged": 0.25}


@dataclass
class SimParams:
    """Knobs of the cell model. Nominal is always the identity and has no entry."""

    bias_concentration: float = 0.05
    condition_shift: dict = field(default_factory=_default_shift)
    condition_coupling: dict = field(default_factory=_default_coupling)
    sensitivity_scale: float = 1.0
    aging_drift: float = 0.4
    anti_cell_block_rows: int = 64

    def __post_init__(self):
        if not self.bias_concentration > 0:
            raise ParameterError("bias_concentration must be > 0")
        if not self.sensitivity_scale > 0:
            raise ParameterError("sensitivity_scale must be > 0")
        if int(self.anti_cell_block_rows) < 1:
            raise ParameterError("anti_cell_block_rows must be >= 1")
        self.condition_shift = {**_default_shift(), **self.condition_shift}
        self.condition_coupling = {**_default_coupling(), **self.condition_coupling}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SimParams:
        return cls(**d)


@dataclass(frozen=True, eq=False)
class DeviceModel:
    device_id: int
    seed: int
    bias: np.ndarray
    sensitivity: np.ndarray
    polarity: np.ndarray  # True for true cells, False for anti-cells
    params: SimParams

    @property
    def rows(self) -> int:
        return self.bias.shape[0]

    @property
    def cols(self) -> int:
        return self.bias.shape[1]


@dataclass(frozen=True, eq=False)
class Measurement:
    device_id: int
    condition: Condition
    bits: np.ndarray
    measurement_seed: int


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def polarity_map(rows: int, cols: int, block_rows: int) -> np.ndarray:
    true_rows = (np.arange(rows) // block_rows) % 2 == 0
    return np.repeat(true_rows[:, None], cols, axis=1)


def new_device(rows: int, cols: int, seed: int, params: SimParams | None = None, device_id: int = 0) -> DeviceModel:
    if rows < 1 or cols < 1:
        raise DimensionError(f"device grid must be at least 1x1, got {rows}x{cols}")
    params = params or SimParams()
    n = rows * cols
    alpha = params.bias_concentration
    bias = rng.betas((seed, rng.BIAS), n, alpha, alpha).reshape(rows, cols)
    sensitivity = rng.normals((seed, rng.SENSITIVITY), n).reshape(rows, cols)
    polarity = polarity_map(rows, cols, params.anti_cell_block_rows)
    return DeviceModel(device_id, seed, _frozen(bias), _frozen(sensitivity), _frozen(polarity), params)


def apply_condition(device: DeviceModel, condition: Condition) -> np.ndarray:
    """Effective power-up probability of every cell under ``condition``."""
    p = device.params
    kind = condition.kind
    m = condition.magnitude
    theta = device.bias
    if kind is ConditionKind.NOMINAL or m == 0:
        return theta.copy()
    delta = p.condition_shift[kind.value]
    coupling = p.condition_coupling[kind.value]
    drift = p.aging_drift if kind is ConditionKind.AGED else 0.0
    if delta == 0 and coupling == 0 and drift == 0:
        return theta.copy()

    clamped = np.clip(theta, _CLAMP, 1 - _CLAMP)
    z = np.log(clamped) - np.log1p(-clamped)
    z += delta * m
    z += device.sensitivity * (p.sensitivity_scale * m * coupling)
    if drift:
        z += drift * m * np.sign(theta - 0.5)
    out = expit(z)
    out[theta == 0.0] = 0.0
    out[theta == 1.0] = 1.0
    return out


def _measurement_key(device: DeviceModel, condition: Condition, measurement_seed: int) -> tuple[int, ...]:
    mag_bits = struct.unpack("<Q", struct.pack("<d", float(condition.magnitude)))[0]
    return (device.seed, rng.MEASUREMENT, condition.kind.index, mag_bits, measurement_seed)


def sample_measurement(
    device: DeviceModel,
    condition: Condition,
    measurement_seed: int,
    effective_bias: np.ndarray | None = None,
) -> Measurement:
    """One power-up capture. ``effective_bias`` may be passed to reuse ``apply_condition`` output."""
    theta = apply_condition(device, condition) if effective_bias is None else effective_bias
    u = rng.uniforms(_measurement_key(device, condition, measurement_seed), theta.size).reshape(theta.shape)
    charged = u < theta
    bits = (charged == device.polarity).astype(np.uint8)
    return Measurement(device.device_id, condition, _frozen(bits), measurement_seed)


# --- binary measurement files -------------------------------------------------


def encode_bits(bits: np.ndarray) -> bytes:
    rows, cols = bits.shape
    header = _BIN_HEADER.pack(BIN_MAGIC, BIN_VERSION, rows, cols)
    return header + np.packbits(bits.astype(np.uint8), axis=1, bitorder="big").tobytes()


def decode_bits(data: bytes) -> np.ndarray:
    if len(data) < _BIN_HEADER.size:
        raise FormatError("measurement file shorter than its header")
    magic, version, rows, cols = _BIN_HEADER.unpack_from(data)
    if magic != BIN_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {BIN_MAGIC!r}")
    if version != BIN_VERSION:
        raise FormatError(f"unsupported measurement version {version}")
    row_bytes = (cols + 7) // 8
    payload = data[_BIN_HEADER.size :]
    if len(payload) != rows * row_bytes:
        raise FormatError(f"payload is {len(payload)} bytes, expected {rows * row_bytes}")
    packed = np.frombuffer(payload, dtype=np.uint8).reshape(rows, row_bytes)
    return np.unpackbits(packed, axis=1, count=cols, bitorder="big")


def write_measurement(path, bits: np.ndarray) -> None:
    Path(path).write_bytes(encode_bits(bits))


def read_measurement(path) -> np.ndarray:
    return decode_bits(Path(path).read_bytes())


# --- datasets ------------------------------------------------------------------


@dataclass
class Dataset:
    rows: int
    cols: int
    master_seed: int
    n_devices: int
    conditions: tuple[Condition, ...]
    per_condition: int
    params: SimParams
    device_seeds: list[int]
    measurements: list[Measurement]

    @property
    def labels(self) -> np.ndarray:
        return np.array([m.device_id for m in self.measurements], dtype=np.int64)

    @staticmethod
    def file_name(m: Measurement, k: int) -> str:
        return f"d{m.device_id}_{m.condition.tag}_{k:03d}.bin"

    def _records(self):
        out = []
        for i, m in enumerate(self.measurements):
            k = i % self.per_condition
            out.append((m, self.file_name(m, k)))
        return out

    def manifest(self) -> dict:
        records = []
        for m, name in self._records():
            records.append(
                {
                    "device_id": m.device_id,
                    "condition": m.condition.tag,
                    "seed": m.measurement_seed,
                    "file": name,
                    "sha256": hashlib.sha256(encode_bits(m.bits)).hexdigest(),
                }
            )
        return {
            "format": "DRNF",
            "version": BIN_VERSION,
            "rows": self.rows,
            "cols": self.cols,
            "master_seed": self.master_seed,
            "n_devices": self.n_devices,
            "conditions": [c.tag for c in self.conditions],
            "per_condition": self.per_condition,
            "params": self.params.to_dict(),
            "device_seeds": self.device_seeds,
            "measurements": records,
        }

    def manifest_bytes(self) -> bytes:
        return (json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n").encode("utf-8")

    def digest(self) -> str:
        return hashlib.sha256(self.manifest_bytes()).hexdigest()

    def write(self, out) -> Path:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        for m, name in self._records():
            write_measurement(out / name, m.bits)
        (out / "manifest.json").write_bytes(self.manifest_bytes())
        return out


def generate_dataset(
    n_devices: int,
    conditions,
    per_condition: int,
    rows: int,
    cols: int,
    master_seed: int,
    params: SimParams | None = None,
    out=None,
) -> Dataset:
    """``n_devices * len(conditions) * per_condition`` captures, device-major order.

    When ``out`` is given the dataset directory is written there.
    """
    conditions = tuple(c if isinstance(c, Condition) else Condition.parse(c) for c in conditions)
    if n_devices < 1 or per_condition < 1 or not conditions:
        raise ParameterError("device, condition and per-condition counts must all be >= 1")
    if out is not None:
        out = Path(out)
        if out.exists() and not out.is_dir():
            raise OSError(f"output location {out} is not a directory")
        out.mkdir(parents=True, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise PermissionError(f"output location {out} is not writable")
    params = params or SimParams()
    device_seeds = [rng.derive_seed(master_seed, rng.DEVICE, d) for d in range(n_devices)]
    measurements = []
    for d, dseed in enumerate(device_seeds):
        device = new_device(rows, cols, dseed, params, device_id=d)
        for cond in conditions:
            theta = apply_condition(device, cond)
            for k in range(per_condition):
                mseed = rng.derive_seed(master_seed, rng.MEASUREMENT, d, cond.kind.index, k)
                measurements.append(sample_measurement(device, cond, mseed, effective_bias=theta))
    ds = Dataset(rows, cols, master_seed, n_devices, conditions, per_condition, params, device_seeds, measurements)
    if out is not None:
        ds.write(out)
    return ds


def load_dataset(path) -> Dataset:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    params = SimParams.from_dict(manifest["params"])
    measurements = []
    for rec in manifest["measurements"]:
        bits = read_measurement(path / rec["file"])
        if bits.shape != (manifest["rows"], manifest["cols"]):
            raise FormatError(f"{rec['file']} has shape {bits.shape}, manifest says "
                              f"{manifest['rows']}x{manifest['cols']}")
        measurements.append(Measurement(rec["device_id"], Condition.parse(rec["condition"]), _frozen(bits), rec["seed"]))
    return Dataset(
        manifest["rows"],
        manifest["cols"],
        manifest["master_seed"],
        manifest["n_devices"],
        tuple(Condition.parse(c) for c in manifest["conditions"]),
        manifest["per_condition"],
        params,
        manifest["device_seeds"],
        measurements,
    )


# --- Hamming diagnostics ---------------------------------------------------------


@dataclass
class GroupStats:
    count: int
    mean: float
    min: float
    max: float


@dataclass
class HammingReport:
    intra: GroupStats | None
    inter: GroupStats | None
    intra_distances: np.ndarray
    inter_distances: np.ndarray


def hamming_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Fraction of positions where two bit matrices differ."""
    return float(np.count_nonzero(a != b)) / a.size


def _stats(d: np.ndarray) -> GroupStats | None:
    if d.size == 0:
        return None
    return GroupStats(int(d.size), float(d.mean()), float(d.min()), float(d.max()))


def hamming_stats(measurements, condition: Condition | str | None = None) -> HammingReport:
    """Fractional Hamming distances over all pairs, grouped same-device vs cross-device.

    ``condition`` restricts the pairs to captures taken under that condition.
    """
    ms = list(getattr(measurements, "measurements", measurements))
    if condition is not None:
        cond = condition if isinstance(condition, Condition) else Condition.parse(condition)
        ms = [m for m in ms if m.condition == cond]
    if len(ms) < 2:
        raise ParameterError("need at least two measurements")
    n_bits = ms[0].bits.size
    packed = [np.packbits(m.bits.ravel()) for m in ms]
    intra, inter = [], []
    for i, j in combinations(range(len(ms)), 2):
        d = int(np.bitwise_count(packed[i] ^ packed[j]).sum(dtype=np.int64)) / n_bits
        (intra if ms[i].device_id == ms[j].device_id else inter).append(d)
    intra_a, inter_a = np.array(intra), np.array(inter)
    return HammingReport(_stats(intra_a), _stats(inter_a), intra_a, inter_a)
