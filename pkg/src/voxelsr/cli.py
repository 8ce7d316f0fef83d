"""Command-line pipeline: gen, train, train-ensemble, sr, eval, gradcheck.

Each subcommand reads an optional JSON config (``--config``) whose keys are
validated against a strict schema (unknown keys are rejected); individual
flags override file values. Every output gets a sidecar or embedded
provenance record (config hash, seeds, package version, checksums) and
commands are idempotent: identical config and inputs give byte-identical
outputs.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys

import numpy as np

from . import __version__
from .errors import ConfigError, DataError, NonFiniteError, ShapeMismatchError
from .model import VARIANTS

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _load_config(args, schema: dict) -> dict:
    """Merge config file and flag overrides against a strict schema."""
    cfg = {k: v for k, (v, _) in schema.items()}
    if getattr(args, "config", None):
        try:
            with open(args.config) as f:
                loaded = json.load(f)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(loaded) - set(schema)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for key in schema:
        flag = getattr(args, key.replace("-", "_"), None)
        if flag is not None:
            cfg[key] = flag
    for key, (_, required) in schema.items():
        if required and cfg[key] is None:
            raise ConfigError(f"missing required config key {key!r}")
    return cfg


def _provenance(cfg: dict, **extra) -> dict:
    rec = {"tool": "voxelsr", "version": __version__, "config_hash": _config_hash(cfg)}
    rec.update(extra)
    return rec


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

GEN_SCHEMA = {
    "out_dir": (None, True),
    "count": (1, False),
    "dims": ([64, 64, 64], False),
    "channels": (6, False),
    "seed": (0, False),
    "n_fields": (3, False),
    "field_cutoff": (0.12, False),
    "n_inclusions": (4, False),
    "noise_amplitude": (0.03, False),
    "boundary_noise_boost": (2.0, False),
    "signature_scale": (1.0, False),
}


def cmd_gen(args) -> int:
    from pathlib import Path

    from .data import PhantomSpec, generate_phantom, write_volume

    cfg = _load_config(args, GEN_SCHEMA)
    out_dir = Path(cfg["out_dir"])
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out_dir}: {exc}") from exc
    entries = []
    for i in range(cfg["count"]):
        spec = PhantomSpec(
            dims=tuple(cfg["dims"]),
            channels=cfg["channels"],
            seed=cfg["seed"] + i,
            n_fields=cfg["n_fields"],
            field_cutoff=cfg["field_cutoff"],
            n_inclusions=cfg["n_inclusions"],
            noise_amplitude=cfg["noise_amplitude"],
            boundary_noise_boost=cfg["boundary_noise_boost"],
            signature_scale=cfg["signature_scale"],
        )
        vol = generate_phantom(spec)
        path = out_dir / f"phantom_{i:03d}.vxl"
        write_volume(path, vol)
        entries.append({"file": path.name, "seed": spec.seed, "sha256": _file_sha256(path)})
        print(f"wrote {path} (seed {spec.seed})")
    manifest = _provenance(cfg, volumes=entries)
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")
    print(f"manifest: {out_dir / 'manifest.json'}")
    return EXIT_OK


TRAIN_SCHEMA = {
    "volumes": (None, True),  # list of VXL1 paths
    "checkpoint": (None, True),
    "log": (None, False),
    "variant": ("baseline", False),
    "r": (2, False),
    "lr": (1e-3, False),
    "epochs": (200, False),
    "batch_size": (32, False),
    "n_pairs": (4000, False),
    "seed": (0, False),
    "valid_fraction": (0.1, False),
    "kl_warmup_fraction": (0.1, False),
    "include_exterior": (True, False),
    "ensemble_size": (1, False),
}


def _train_config(cfg):
    from .train import TrainConfig

    if cfg["variant"] not in VARIANTS:
        raise ConfigError(f"unknown variant {cfg['variant']!r}, expected one of {VARIANTS}")
    return TrainConfig(
        variant=cfg["variant"],
        r=cfg["r"],
        lr=cfg["lr"],
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        seed=cfg["seed"],
        kl_warmup_fraction=cfg["kl_warmup_fraction"],
        valid_fraction=cfg["valid_fraction"],
        ensemble_size=cfg["ensemble_size"],
        n_pairs=cfg["n_pairs"],
        include_exterior=cfg["include_exterior"],
    )


def _load_volumes(paths):
    from .data import read_volume

    if isinstance(paths, str):
        paths = [paths]
    vols = []
    for p in paths:
        try:
            vols.append(read_volume(p))
        except FileNotFoundError as exc:
            raise DataError(f"volume file not found: {p}") from exc
    return vols


def _sample_training_pairs(tc, volumes):
    from .data import sample_patch_pairs

    pairs = []
    per_vol = max(1, tc.n_pairs // len(volumes))
    for vi, vol in enumerate(volumes):
        seed = int(np.random.SeedSequence((tc.seed, 71, 0, vi)).generate_state(1)[0])
        pairs.extend(
            sample_patch_pairs(vol, tc.r, per_vol, seed=seed,
                               include_exterior=tc.include_exterior, volume_id=vi)
        )
    return pairs


def _write_log(path, log, provenance):
    with open(path, "w") as f:
        f.write(json.dumps({"provenance": provenance}, sort_keys=True) + "\n")
        for entry in log:
            f.write(json.dumps(entry, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    from .data import block_mean_downsample  # noqa: F401  (validates import graph early)
    from .model import save_checkpoint
    from .train import train

    cfg = _load_config(args, TRAIN_SCHEMA)
    tc = _train_config(cfg)
    volumes = _load_volumes(cfg["volumes"])
    for v in volumes:
        if v.channels != volumes[0].channels:
            raise DataError("training volumes disagree on channel count")
        if any(d % tc.r for d in v.dims):
            raise DataError(f"volume dims {v.dims} are not divisible by r = {tc.r}")
    pairs = _sample_training_pairs(tc, volumes)
    params, log = train(tc, pairs)
    manifest = _provenance(cfg, seeds={"train": tc.seed}, n_pairs=len(pairs),
                           final_valid=log[-1]["valid"] if log else None)
    save_checkpoint(cfg["checkpoint"], params, manifest)
    print(f"checkpoint: {cfg['checkpoint']} (variant {tc.variant})")
    if cfg["log"]:
        _write_log(cfg["log"], log, manifest)
        print(f"log: {cfg['log']}")
    return EXIT_OK


def cmd_train_ensemble(args) -> int:
    from .model import save_checkpoint
    from .train import train_ensemble

    cfg = _load_config(args, TRAIN_SCHEMA)
    tc = _train_config(cfg)
    volumes = _load_volumes(cfg["volumes"])
    members = train_ensemble(tc, volumes)
    manifest = _provenance(cfg, seeds={"train": tc.seed})
    base = cfg["checkpoint"]
    for k, params in enumerate(members):
        path = f"{base}.{k:02d}" if len(members) > 1 else base
        save_checkpoint(path, params, dict(manifest, member=k))
        print(f"checkpoint: {path}")
    return EXIT_OK


SR_SCHEMA = {
    "checkpoint": (None, True),
    "input": (None, True),
    "output": (None, True),
    "variance_output": (None, False),
    "mc_samples": (0, False),  # 0 = deterministic tessellation
    "iso_variance": (0.0, False),
    "tile": (22, False),
    "seed": (0, False),
}


def cmd_sr(args) -> int:
    from .data import write_volume
    from .infer import mc_predict, super_resolve
    from .model import load_checkpoint

    cfg = _load_config(args, SR_SCHEMA)
    try:
        params, _ = load_checkpoint(cfg["checkpoint"])
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {cfg['checkpoint']}") from exc
    vols = _load_volumes(cfg["input"])
    vol = vols[0]
    meta = _provenance(cfg, model_checksum=params.checksum(), variant=params.config.variant)
    if cfg["mc_samples"]:
        result = mc_predict(params, vol, T=cfg["mc_samples"], seed=cfg["seed"],
                            tile=cfg["tile"], iso_variance=cfg["iso_variance"])
        write_volume(cfg["output"], result.mean)
        meta["mc"] = {k: v for k, v in result.provenance.items() if k != "model_checksum"}
        if cfg["variance_output"]:
            write_volume(cfg["variance_output"], result.variance)
            print(f"variance: {cfg['variance_output']}")
    else:
        if cfg["variance_output"]:
            raise ConfigError("variance output requires mc_samples >= 1")
        sr = super_resolve(params, vol, tile=cfg["tile"])
        write_volume(cfg["output"], sr)
    with open(str(cfg["output"]) + ".meta.json", "w") as f:
        json.dump(meta, f, sort_keys=True, indent=2)
        f.write("\n")
    print(f"output: {cfg['output']}")
    return EXIT_OK


EVAL_SCHEMA = {
    "prediction": (None, True),
    "truth": (None, True),
    "variance": (None, False),
    "report": (None, False),  # default: stdout
    "margin": (None, False),  # default: receptive-field radius in HR voxels (2r)
    "r": (2, False),
    "pgm_slice": (None, False),  # {"axis": 0, "index": k, "channel": 0, "path": ...}
    "csv_slice": (None, False),
}


def cmd_eval(args) -> int:
    from .metrics import metric_records, region_masks, write_csv_slice, write_jsonl, write_pgm

    cfg = _load_config(args, EVAL_SCHEMA)
    pred = _load_volumes(cfg["prediction"])[0]
    truth = _load_volumes(cfg["truth"])[0]
    if pred.data.shape != truth.data.shape:
        raise DataError(
            f"prediction dims {pred.data.shape} != truth dims {truth.data.shape}"
        )
    if truth.mask is None:
        raise DataError("truth volume has no foreground mask; cannot build regions")
    margin = cfg["margin"] if cfg["margin"] is not None else 2 * cfg["r"]
    regions = region_masks(truth.mask, margin)
    var = None
    if cfg["variance"]:
        var_vol = _load_volumes(cfg["variance"])[0]
        if var_vol.data.shape != truth.data.shape:
            raise DataError("variance volume dims do not match the truth volume")
        var = var_vol.data
    records = [{"record": "provenance", **_provenance(cfg)}]
    records += metric_records(pred.data, truth.data, regions, pred_var=var)
    if cfg["report"]:
        write_jsonl(cfg["report"], records)
        print(f"report: {cfg['report']}")
    else:
        write_jsonl(sys.stdout, records)
    for key, writer in (("pgm_slice", write_pgm), ("csv_slice", write_csv_slice)):
        if cfg[key]:
            s = cfg[key]
            axis, index, channel = s.get("axis", 0), s["index"], s.get("channel", 0)
            sl = np.take(pred.data[channel], index, axis=axis)
            writer(s["path"], sl)
            print(f"{key}: {s['path']}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .validation import gradient_suite

    lines, ok, _ = gradient_suite()
    for line in lines:
        print(line)
    if not ok:
        raise NonFiniteError("gradient suite failed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_schema_flags(p: argparse.ArgumentParser, schema: dict) -> None:
    p.add_argument("--config", help="JSON config file (strict schema)")
    for key, (default, _) in schema.items():
        flag = "--" + key.replace("_", "-")
        if isinstance(default, bool):
            p.add_argument(flag, type=lambda s: s.lower() in ("1", "true", "yes"), default=None,
                           metavar="BOOL")
        elif isinstance(default, int) and not isinstance(default, bool):
            p.add_argument(flag, type=int, default=None)
        elif isinstance(default, float):
            p.add_argument(flag, type=float, default=None)
        elif isinstance(default, list) or key in ("volumes", "dims", "pgm_slice", "csv_slice"):
            p.add_argument(flag, type=json.loads, default=None, metavar="JSON")
        else:
            p.add_argument(flag, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxelsr",
        description="Bayesian 3-D super-resolution pipeline (generate, train, infer, evaluate).",
    )
    parser.add_argument("--version", action="version", version=f"voxelsr {__version__}")
    parser.add_argument("--threads", type=int, default=1,
                        help="execution mode hint: 1 = serial/deterministic (default)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, schema, fn in (
        ("gen", GEN_SCHEMA, cmd_gen),
        ("train", TRAIN_SCHEMA, cmd_train),
        ("train-ensemble", TRAIN_SCHEMA, cmd_train_ensemble),
        ("sr", SR_SCHEMA, cmd_sr),
        ("eval", EVAL_SCHEMA, cmd_eval),
    ):
        p = sub.add_parser(name)
        _add_schema_flags(p, schema)
        p.set_defaults(fn=fn)
    g = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    g.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ShapeMismatchError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
