"""``dramnet`` command line: gen, train, eval, auth, export-image, shapes.

Machine-readable JSON goes to stdout, progress logs to stderr.  Exit codes:
0 success or accept, 1 reject, 2 usage, 3 I/O or format, 4 training
contract, 5 split mismatch.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ContractError, DimensionError, FormatError, ParameterError, ShapeError
from .evaluation import DEFAULT_THRESHOLD, authenticate, confusion_csv, evaluate, metrics_json, roc_csv
from .imaging import FingerprintImage, export_pgm
from .model import build_model, format_shape, infer_shapes, load_model, save_model
from .presets import ARCHITECTURES, FULL_INPUT, TABLE1_DEVIATIONS, TABLE1_INPUT_SIZES, get_architecture
from .sim import ALL_CONDITIONS, Condition, SimParams, generate_dataset, load_dataset, read_measurement
from .training import TrainConfig, image_set, split_dataset, train

EXIT_OK = 0
EXIT_REJECT = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_CONTRACT = 4
EXIT_SPLIT = 5

RUN_MANIFEST = "run.json"

log = logging.getLogger("dramnet")


class UsageError(Exception):
    pass


class SplitMismatch(Exception):
    pass


# --- manifests and config ------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    digests: dict = field(default_factory=dict)
    version: str = __version__

    def add_output(self, name: str, path) -> None:
        self.outputs[name] = str(path)
        self.digests[name] = sha256_file(path)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_config(path) -> dict:
    """JSON object, or ``key = value`` lines with ``#`` comments (values parsed as JSON when possible)."""
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        try:
            return json.loads(text)
        except json.JSONDecodeError as e:
            raise UsageError(f"config {path}: {e}") from None
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"config {path}:{n}: expected key = value")
        value = value.strip()
        try:
            out[key.strip().replace("-", "_")] = json.loads(value)
        except json.JSONDecodeError:
            out[key.strip().replace("-", "_")] = value
    return out


def resolve(args, defaults: dict) -> dict:
    """defaults <- config file <- explicit flags (flags left as None are not explicit)."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        cfg = read_config(args.config)
        unknown = set(cfg) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        merged.update(cfg)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def emit(doc) -> None:
    sys.stdout.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    sys.stdout.flush()


# --- commands --------------------------------------------------------------------------

GEN_DEFAULTS = {
    "devices": 3,
    "conditions": [c.tag for c in ALL_CONDITIONS],
    "per_condition": 10,
    "rows": 1024,
    "cols": 1024,
    "seed": 0,
    "params": {},
}


def cmd_gen(args) -> int:
    cfg = resolve(args, GEN_DEFAULTS)
    conditions = cfg["conditions"]
    if isinstance(conditions, str):
        conditions = [c for c in conditions.split(",") if c.strip()]
    conditions = [Condition.parse(c) for c in conditions]
    cfg["conditions"] = [c.tag for c in conditions]
    params = SimParams.from_dict(cfg["params"])
    cfg["params"] = params.to_dict()
    out = Path(args.out)
    ds = generate_dataset(
        cfg["devices"], conditions, cfg["per_condition"], cfg["rows"], cfg["cols"], cfg["seed"], params, out=out
    )
    manifest = RunManifest(
        "gen", cfg, {"master_seed": cfg["seed"], "device_seeds": ds.device_seeds}, outputs={"dataset": str(out)}
    )
    manifest.add_output("manifest", out / "manifest.json")
    manifest.write(out / RUN_MANIFEST)
    log.info("wrote %d measurements to %s", len(ds.measurements), out)
    emit({"out": str(out), "measurements": len(ds.measurements), "digest": ds.digest()})
    return EXIT_OK


TRAIN_DEFAULTS = {
    "arch": "dramnet",
    "optimizer": "adam",
    "augment": False,
    "input_size": 64,
    "epochs": 30,
    "seed": 0,
    "split_seed": None,
    "split_ratio": 0.6,
    "lr0": None,
    "batch_size": 16,
    "l2": 1e-4,
    "crop_fraction": 0.875,
    "decay_rate": 0.9,
    "decay_period": 500,
}


def _split(ds, size, ratio, seed):
    images = image_set(ds.measurements, size)
    tr, te = split_dataset(images.labels, ratio, seed)
    return images, tr, te


def cmd_train(args) -> int:
    cfg = resolve(args, TRAIN_DEFAULTS)
    if cfg["split_seed"] is None:
        cfg["split_seed"] = cfg["seed"]
    if cfg["arch"].replace("_", "-") not in ARCHITECTURES:
        raise UsageError(f"unknown architecture {cfg['arch']!r}")
    tc = TrainConfig(
        optimizer=cfg["optimizer"],
        lr0=cfg["lr0"],
        decay_rate=cfg["decay_rate"],
        decay_period=cfg["decay_period"],
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        l2=cfg["l2"],
        augment=cfg["augment"],
        crop_fraction=cfg["crop_fraction"],
        input_size=cfg["input_size"],
        split_ratio=cfg["split_ratio"],
        seed=cfg["seed"],
    )
    data = Path(args.data)
    ds = load_dataset(data)
    images, tr, te = _split(ds, tc.input_size, tc.split_ratio, cfg["split_seed"])
    n_classes = int(images.labels.max()) + 1
    arch = get_architecture(cfg["arch"], tc.input_size, n_classes)
    model = build_model(arch, tc.seed)
    log.info("%s: %d train / %d test images, %d parameters", arch.name, len(tr), len(te), model.n_params())
    trained, history = train(model, images.subset(tr), images.subset(te), tc, log=log.info)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(trained, out / "model.drnw")
    history.to_csv(out / "history.csv")
    resolved = {**cfg, **tc.to_dict()}
    manifest = RunManifest(
        "train",
        resolved,
        {"init_seed": tc.seed, "split_seed": cfg["split_seed"], "dropout_seed": tc.seed, "shuffle_seed": tc.seed},
        inputs={"data": str(data), "dataset_digest": sha256_file(data / "manifest.json")},
    )
    manifest.add_output("model", out / "model.drnw")
    manifest.add_output("history", out / "history.csv")
    manifest.write(out / RUN_MANIFEST)
    emit(
        {
            "out": str(out),
            "arch": arch.name,
            "train_size": history.train_size,
            "batches_per_epoch": history.batches_per_epoch,
            "steps": len(history.steps),
            "final_loss": history.losses[-1] if history.losses else None,
            "final_test_acc": history.test_acc[-1] if history.test_acc else None,
            "wall_time": history.wall_time,
        }
    )
    return EXIT_OK


def _training_manifest(model_path: Path) -> dict | None:
    path = model_path.parent / RUN_MANIFEST
    if not path.exists():
        return None
    doc = json.loads(path.read_text(encoding="utf-8"))
    return doc if doc.get("command") == "train" else None


def cmd_eval(args) -> int:
    model_path = Path(args.model)
    model = load_model(model_path)
    trained_with = _training_manifest(model_path)
    split_seed = args.split_seed
    ratio = args.split_ratio
    if trained_with is not None:
        expected = trained_with["seeds"]["split_seed"]
        if split_seed is None:
            split_seed = expected
        elif split_seed != expected:
            msg = f"split seed {split_seed} differs from the training split seed {expected}"
            if not args.force:
                raise SplitMismatch(msg)
            log.warning("%s; continuing because of --force", msg)
        if ratio is None:
            ratio = trained_with["config"]["split_ratio"]
    split_seed = 0 if split_seed is None else split_seed
    ratio = 0.6 if ratio is None else ratio

    data = Path(args.data)
    ds = load_dataset(data)
    images, _, te = _split(ds, model.arch.input_shape[0], ratio, split_seed)
    ev = evaluate(model, images.subset(te))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(metrics_json(ev), encoding="utf-8")
    (out / "roc.csv").write_text(roc_csv(ev.curves), encoding="utf-8")
    (out / "confusion.csv").write_text(confusion_csv(ev.report.counts), encoding="utf-8")
    manifest = RunManifest(
        "eval",
        {"split_ratio": ratio, "force": args.force},
        {"split_seed": split_seed},
        inputs={"model": str(model_path), "model_digest": sha256_file(model_path), "data": str(data)},
    )
    for name in ("metrics.json", "roc.csv", "confusion.csv"):
        manifest.add_output(name, out / name)
    manifest.write(out / RUN_MANIFEST)
    r = ev.report
    log.info("accuracy %.4f  macro precision %.4f  macro recall %.4f  macro F1 %.4f",
             r.accuracy, r.macro_precision, r.macro_recall, r.macro_f1)
    emit({"out": str(out), "n_samples": len(te), **r.to_dict()})
    return EXIT_OK


def cmd_auth(args) -> int:
    model = load_model(args.model)
    bits = read_measurement(args.measurement)
    decision = authenticate(model, bits, args.threshold)
    if args.manifest:
        m = RunManifest(
            "auth",
            {"threshold": args.threshold},
            {},
            inputs={"model": str(args.model), "measurement": str(args.measurement),
                    "model_digest": sha256_file(args.model), "measurement_digest": sha256_file(args.measurement)},
        )
        m.outputs["decision"] = decision.to_dict()
        m.write(args.manifest)
    emit(decision.to_dict())
    return EXIT_OK if decision.accepted else EXIT_REJECT


def cmd_export_image(args) -> int:
    bits = read_measurement(args.measurement)
    image = FingerprintImage(bits * np.uint8(255))
    export_pgm(image, args.out)
    if args.manifest:
        m = RunManifest("export-image", {}, {}, inputs={"measurement": str(args.measurement)})
        m.add_output("image", args.out)
        m.write(args.manifest)
    emit({"out": str(args.out), "rows": image.rows, "cols": image.cols})
    return EXIT_OK


def shape_report(arch_name: str, size: int) -> dict:
    arch = get_architecture(arch_name, size)
    table = infer_shapes(arch)
    compare = arch_name.replace("_", "-") == "dramnet" and size == FULL_INPUT
    groups = []
    for group, shape in table.group_inputs().items():
        entry = {"group": group, "input_shape": list(shape)}
        if compare and group in TABLE1_INPUT_SIZES:
            printed = TABLE1_INPUT_SIZES[group]
            entry["printed_input_shape"] = list(printed)
            entry["matches_printed"] = tuple(shape) == printed
            if group in TABLE1_DEVIATIONS:
                entry["note"] = TABLE1_DEVIATIONS[group]
        groups.append(entry)
    return {
        "arch": arch.name,
        "input": list(arch.input_shape),
        "layers": [
            {"index": r.index, "group": r.group, "kind": r.kind, "input_shape": list(r.input_shape),
             "output_shape": list(r.output_shape), "params": r.params}
            for r in table.rows
        ],
        "groups": groups,
        "total_params": table.total_params,
    }


def format_shape_report(report: dict) -> str:
    header = ("#", "group", "kind", "input", "output", "params")
    rows = [
        (str(r["index"]), r["group"] or "", r["kind"], format_shape(r["input_shape"]), format_shape(r["output_shape"]),
         str(r["params"]))
        for r in report["layers"]
    ]
    widths = [max(len(x) for x in col) for col in zip(header, *rows)]
    lines = [f"{report['arch']}  input {format_shape(report['input'])}"]
    lines += ["  ".join(x.ljust(w) for x, w in zip(row, widths)).rstrip() for row in (header, *rows)]
    lines.append(f"total parameters: {report['total_params']}")
    for g in report["groups"]:
        if "printed_input_shape" in g:
            status = "ok" if g["matches_printed"] else "DEVIATION"
            line = f"{g['group']}: input {format_shape(g['input_shape'])}, printed " \
                   f"{format_shape(g['printed_input_shape'])} [{status}]"
            if "note" in g:
                line += f" - {g['note']}"
            lines.append(line)
    return "\n".join(lines) + "\n"


def cmd_shapes(args) -> int:
    report = shape_report(args.arch, args.input)
    if args.manifest:
        RunManifest("shapes", {"arch": args.arch, "input": args.input}, {}, outputs={"report": report}).write(
            args.manifest
        )
    if args.json:
        emit(report)
    else:
        sys.stdout.write(format_shape_report(report))
    return EXIT_OK


# --- argument parsing --------------------------------------------------------------------


def _flag(v: str) -> bool:
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {v!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dramnet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"dramnet {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic fingerprint dataset")
    g.add_argument("--devices", type=int)
    g.add_argument("--conditions", help="comma-separated condition tags (default: all six)")
    g.add_argument("--per-condition", dest="per_condition", type=int)
    g.add_argument("--rows", type=int)
    g.add_argument("--cols", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a classifier on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--arch", choices=sorted(ARCHITECTURES))
    t.add_argument("--optimizer", choices=["sgd", "adam"])
    t.add_argument("--augment", nargs="?", const=True, type=_flag)
    t.add_argument("--input-size", dest="input_size", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--split-seed", dest="split_seed", type=int)
    t.add_argument("--split-ratio", dest="split_ratio", type=float)
    t.add_argument("--lr", dest="lr0", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--l2", type=float)
    t.add_argument("--crop-fraction", dest="crop_fraction", type=float)
    t.add_argument("--config")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained model on the held-out split")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split-seed", dest="split_seed", type=int)
    e.add_argument("--split-ratio", dest="split_ratio", type=float)
    e.add_argument("--force", action="store_true", help="evaluate even if the split seed differs from training")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("auth", help="accept or reject one measurement")
    a.add_argument("--model", required=True)
    a.add_argument("measurement")
    a.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    a.add_argument("--manifest", help="also write a run manifest here")
    a.set_defaults(func=cmd_auth)

    x = sub.add_parser("export-image", help="write a measurement as a PGM image")
    x.add_argument("measurement")
    x.add_argument("out")
    x.add_argument("--manifest", help="also write a run manifest here")
    x.set_defaults(func=cmd_export_image)

    s = sub.add_parser("shapes", help="print the per-layer shape table of an architecture")
    s.add_argument("--arch", choices=sorted(ARCHITECTURES), default="dramnet")
    s.add_argument("--input", type=int, default=64)
    s.add_argument("--json", action="store_true")
    s.add_argument("--manifest", help="also write a run manifest here")
    s.set_defaults(func=cmd_shapes)
    return p


def _thread_limit():
    n = os.environ.get("DRAMNET_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    try:
        return threadpool_limits(limits=max(1, int(n)))
    except ValueError:
        raise UsageError(f"DRAMNET_THREADS must be an integer, got {n!r}") from None


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    log.handlers[:] = [handler]
    log.propagate = False
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    try:
        limit = _thread_limit()
        try:
            return args.func(args)
        finally:
            if limit is not None:
                limit.restore_original_limits()
    except (UsageError, ParameterError, ShapeError, DimensionError, KeyError) as e:
        log.error("%s", e)
        return EXIT_USAGE
    except ContractError as e:
        log.error("training contract violated: %s", e)
        return EXIT_CONTRACT
    except SplitMismatch as e:
        log.error("%s (pass --force to evaluate anyway)", e)
        return EXIT_SPLIT
    except (OSError, FormatError, json.JSONDecodeError) as e:
        log.error("%s", e)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
