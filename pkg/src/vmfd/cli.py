"""``vmfd`` command line: generate scenes, pretrain, probe checkpoints, compare runs.

Every output directory holds exactly one ``manifest.json``.  Failures print a
single line ``vmfd-error[<kind>]: <message>`` to stderr and exit non-zero:

====  ==========================================================
code  meaning
====  ==========================================================
2     usage, config or missing-input error
3     refusing to overwrite an existing run (use ``--force``)
4     corrupt or mismatched file (format, version, config hash)
5     runtime failure inside a component (numerics, degenerate data)
====  ==========================================================
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from ._binio import SerializationError, atomic_write_text
from .config import ConfigError, load_config, scene_config, stable_hash, train_config
from .encoders import DistillationModel, load_checkpoint, save_checkpoint
from .synthdata import SceneConfig, generate_dataset, load_scene, save_scene
from .trainer import METRIC_COLUMNS, TrainConfig, evaluate, train
from .utils.validation import DegenerateInputError

__all__ = ["CliError", "RunManifest", "main"]

logger = logging.getLogger("vmfd")

MANIFEST_NAME = "manifest.json"
METRICS_NAME = "metrics.jsonl"
CHECKPOINT_NAME = "model.ckpt"
SUMMARY_METRICS = ("ppnce", "sup", "kl", "total", "accuracy", "miou", "sigma_w_sq", "sigma_b_sq")
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = 2):
        super().__init__(message)
        self.kind = kind
        self.code = code


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    version: str
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    duration_s: float = 0.0
    status: str = "complete"

    @property
    def manifest_hash(self) -> str:
        return stable_hash({"command": self.command, "config_hash": self.config_hash,
                            "inputs": self.inputs})

    def to_dict(self) -> dict:
        return {"command": self.command, "manifest_hash": self.manifest_hash,
                "config_hash": self.config_hash, "seed": self.seed, "version": self.version,
                "inputs": self.inputs, "outputs": self.outputs, "config": self.config,
                "duration_s": self.duration_s, "status": self.status}

    @classmethod
    def from_dict(cls, d: dict) -> RunManifest:
        keys = ("command", "config_hash", "seed", "version", "inputs", "outputs", "config",
                "duration_s", "status")
        try:
            return cls(**{k: d[k] for k in keys})
        except (KeyError, TypeError) as exc:
            raise CliError("manifest", f"malformed manifest: {exc}", 4) from None

    def write(self, out_dir: Path) -> None:
        atomic_write_text(out_dir / MANIFEST_NAME, json.dumps(self.to_dict(), indent=2) + "\n")


def read_manifest(run_dir) -> RunManifest:
    path = Path(run_dir) / MANIFEST_NAME
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise CliError("missing", f"no {MANIFEST_NAME} in {run_dir}") from None
    except json.JSONDecodeError as exc:
        raise CliError("manifest", f"{path} is not valid JSON: {exc}", 4) from None
    return RunManifest.from_dict(data)


def version_string() -> str:
    """Package version plus ``git describe`` of the source tree when available."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).resolve().parent)
        rev = out.stdout.strip() if out.returncode == 0 else ""
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{__version__}+{rev}" if rev else __version__


def _prepare_out(out_dir, manifest_hash: str, force: bool) -> Path:
    out = Path(out_dir)
    path = out / MANIFEST_NAME
    if path.exists() and not force:
        try:
            existing = json.loads(path.read_text()).get("manifest_hash")
        except (OSError, json.JSONDecodeError):
            existing = None
        what = "the same run" if existing == manifest_hash else f"another run ({existing})"
        raise CliError("exists", f"{out} already holds {what}; pass --force to overwrite", 3)
    out.mkdir(parents=True, exist_ok=True)
    if force:
        path.unlink(missing_ok=True)
    return out


def _config_entries(path):
    if path is None:
        raise CliError("usage", "--config is required")
    return load_config(path)


def _load_dataset(data_dir, split: str):
    manifest = read_manifest(data_dir)
    if manifest.command != "generate" or manifest.status != "complete":
        raise CliError("data", f"{data_dir} is not a completed generate output")
    names = manifest.outputs.get(split, [])
    scenes = []
    for name in names:
        try:
            scenes.append(load_scene(Path(data_dir) / name))
        except FileNotFoundError:
            raise CliError("missing", f"scene file {name} listed in the manifest is missing") from None
    return manifest, scenes


def cmd_generate(args) -> RunManifest:
    overrides = {} if args.seed is None else {"seed": args.seed}
    config = scene_config(_config_entries(args.config), overrides=overrides)
    manifest = RunManifest("generate", config.config_hash(), config.seed, version_string(),
                           config=config.to_dict())
    out = _prepare_out(args.out, manifest.manifest_hash, args.force)
    start = time.perf_counter()
    train_scenes, eval_scenes = generate_dataset(config)
    outputs = {"train": [], "eval": []}
    for split, scenes in (("train", train_scenes), ("eval", eval_scenes)):
        for i, scene in enumerate(scenes):
            name = f"{split}_{i:04d}.scene"
            scene.meta["manifest_hash"] = manifest.manifest_hash
            save_scene(scene, out / name)
            outputs[split].append(name)
    manifest.outputs = outputs
    manifest.duration_s = round(time.perf_counter() - start, 3)
    manifest.write(out)
    logger.info("wrote %d training and %d evaluation scenes to %s",
                len(train_scenes), len(eval_scenes), out)
    return manifest


def _json_value(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, list):
        return [_json_value(x) for x in v]
    return v


def _metric_line(record: dict) -> str:
    return json.dumps({k: _json_value(record[k]) for k in METRIC_COLUMNS}) + "\n"


def cmd_pretrain(args) -> RunManifest:
    if args.data is None:
        raise CliError("usage", "--data is required")
    overrides = {} if args.seed is None else {"seed": args.seed}
    config = train_config(_config_entries(args.config), overrides=overrides)
    data_manifest, scenes = _load_dataset(args.data, "train")
    if not scenes:
        raise CliError("data", f"{args.data} has no training scenes")
    _, eval_scenes = _load_dataset(args.data, "eval")
    manifest = RunManifest("pretrain", config.config_hash(), config.seed, version_string(),
                           inputs={"data": str(args.data), "data_hash": data_manifest.manifest_hash},
                           config=config.to_dict(), status="running")
    out = _prepare_out(args.out, manifest.manifest_hash, args.force)
    for stale in (CHECKPOINT_NAME, METRICS_NAME):
        (out / stale).unlink(missing_ok=True)

    start = time.perf_counter()
    lines = []
    state, history = train(scenes, config, callback=lambda rec: lines.append(_metric_line(rec)))
    summary = {"record": "summary", "manifest_hash": manifest.manifest_hash,
               "epochs": len(history)}
    summary.update({k: history[-1][k] for k in ("ppnce", "sup", "kl", "total")})
    if eval_scenes:
        result = evaluate(state.model, eval_scenes)
        summary.update({"accuracy": result["accuracy"], "miou": result["miou"],
                        "per_class_iou": result["per_class_iou"],
                        "sigma_w_sq": result["sigma_w_sq"], "sigma_b_sq": result["sigma_b_sq"]})
    lines.append(json.dumps({k: _json_value(v) for k, v in summary.items()}) + "\n")

    save_checkpoint(out / CHECKPOINT_NAME, state.model,
                    {"config": config.to_dict(), "config_hash": config.config_hash(),
                     "manifest_hash": manifest.manifest_hash, "complete": True})
    atomic_write_text(out / METRICS_NAME, "".join(lines))
    manifest.outputs = {"metrics": METRICS_NAME, "checkpoint": CHECKPOINT_NAME}
    manifest.duration_s = round(time.perf_counter() - start, 3)
    manifest.status = "complete"
    manifest.write(out)
    logger.info("pretraining finished: total loss %.5f", summary["total"])
    return manifest


def _load_model(path) -> DistillationModel:
    try:
        model = load_checkpoint(path)
    except FileNotFoundError:
        raise CliError("missing", f"checkpoint not found: {path}") from None
    except SerializationError as exc:
        raise CliError("checkpoint", f"{path}: {exc}", 4) from None
    meta = model.meta
    if "config" in meta:
        if stable_hash_config(meta["config"]) != meta.get("config_hash"):
            raise CliError("hash", f"{path}: stored config does not match its config hash", 4)
    return model


def stable_hash_config(config: dict) -> str:
    return TrainConfig(**config).config_hash()


def cmd_probe(args) -> dict:
    if args.data is None:
        raise CliError("usage", "--data is required")
    model = _load_model(args.checkpoint)
    if args.config is not None:
        expected = train_config(load_config(args.config), required=()).config_hash()
        if expected != model.meta.get("config_hash"):
            raise CliError("hash", f"checkpoint config hash {model.meta.get('config_hash')} "
                                   f"does not match {args.config} ({expected})", 4)
    _, scenes = _load_dataset(args.data, "eval")
    if not scenes:
        _, scenes = _load_dataset(args.data, "train")
    if not scenes:
        raise CliError("data", f"{args.data} has no scenes")
    result = evaluate(model, scenes)
    result = {"checkpoint": str(args.checkpoint),
              "manifest_hash": model.meta.get("manifest_hash"),
              "config_hash": model.meta.get("config_hash"), **result}
    text = json.dumps({k: _json_value(v) for k, v in result.items()}, indent=2) + "\n"
    if args.out is None:
        sys.stdout.write(text)
    else:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out, text)
    return result


def _final_summary(run_dir):
    """Summary record of a completed run, or None with a reason."""
    try:
        manifest = read_manifest(run_dir)
    except CliError as exc:
        return None, str(exc)
    if manifest.command != "pretrain" or manifest.status != "complete":
        return None, f"{run_dir} is not a completed pretrain run"
    try:
        last = (Path(run_dir) / METRICS_NAME).read_text().splitlines()[-1]
        summary = json.loads(last)
    except (OSError, IndexError, json.JSONDecodeError):
        return None, f"{run_dir} has no readable metrics summary"
    if summary.get("record") != "summary":
        return None, f"{run_dir} metrics stream has no summary record"
    return (manifest, summary), None


def cmd_compare(args) -> list[dict]:
    runs = []
    for run_dir in args.runs:
        found, reason = _final_summary(run_dir)
        if found is None:
            logger.warning("skipping incomplete run: %s", reason)
            print(f"vmfd-warning[incomplete]: {reason}", file=sys.stderr)
            continue
        runs.append((str(run_dir), *found))
    if len(runs) < 2:
        raise CliError("usage", f"need at least two completed runs; found {len(runs)}")

    groups: dict[str, list] = {}
    for run_dir, manifest, summary in runs:
        if args.aggregate:
            key = stable_hash({k: v for k, v in manifest.config.items() if k != "seed"})
        else:
            key = run_dir
        groups.setdefault(key, []).append((run_dir, summary))

    header = ["run", "n_runs"] + [f"{m}_{s}" for m in SUMMARY_METRICS for s in ("mean", "std")]
    rows = []
    for key, members in groups.items():
        row = {"run": ",".join(r for r, _ in members), "n_runs": len(members)}
        for metric in SUMMARY_METRICS:
            vals = np.array([s[metric] for _, s in members
                             if isinstance(s.get(metric), (int, float))], dtype=float)
            row[f"{metric}_mean"] = float(vals.mean()) if vals.size else float("nan")
            row[f"{metric}_std"] = float(vals.std()) if vals.size else float("nan")
        rows.append(row)

    def fmt(v):
        return f"{v:.6g}" if isinstance(v, float) else str(v)

    text = "\t".join(header) + "\n" + "".join("\t".join(fmt(r[h]) for h in header) + "\n" for r in rows)
    if args.out is None:
        sys.stdout.write(text)
    else:
        atomic_write_text(Path(args.out), text)
    return rows


class _Parser(argparse.ArgumentParser):
    """Argument errors use the same single-line prefix as every other failure."""

    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vmfd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"vmfd {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write synthetic scenes")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", help="run distillation pretraining")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="linear probe of a checkpoint on held-out scenes")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--config", help="verify the checkpoint was trained with this config")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("compare", help="tabulate final metrics of several runs")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out")
    p.add_argument("--aggregate", action="store_true",
                   help="pool runs whose configs differ only in seed (mean and std)")
    p.set_defaults(func=cmd_compare)
    return parser


def _setup_logging() -> None:
    name = os.environ.get("VMFD_LOG_LEVEL", "error").lower()
    if name not in LOG_LEVELS:
        raise CliError("usage", f"VMFD_LOG_LEVEL must be one of {', '.join(LOG_LEVELS)}; got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def _fail(kind: str, message: str, code: int) -> int:
    first_line = " ".join(str(message).split())
    print(f"vmfd-error[{kind}]: {first_line}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliError as exc:
        return _fail(exc.kind, str(exc), exc.code)
    except SystemExit as exc:           # --help and --version
        return int(exc.code or 0)
    try:
        _setup_logging()
        args.func(args)
    except CliError as exc:
        return _fail(exc.kind, str(exc), exc.code)
    except ConfigError as exc:
        return _fail("config", str(exc), 2)
    except SerializationError as exc:
        return _fail("format", str(exc), 4)
    except (DegenerateInputError, FloatingPointError, ValueError) as exc:
        return _fail("runtime", str(exc), 5)
    except OSError as exc:
        return _fail("io", f"{exc.filename or ''} {exc.strerror or exc}".strip(), 2)
    return 0


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
