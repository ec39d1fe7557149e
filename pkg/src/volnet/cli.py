"""``volnet`` command line.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure
(non-finite loss or a failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from volnet import checkpoint, data, gradcheck, plotting, train
from volnet.config import ConfigError, RunConfig, load_config
from volnet.model import load_model
from volnet.ops import GeometryError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("synth", "preprocess", "train", "eval", "predict", "gradcheck", "ablate")

logger = logging.getLogger("volnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="volnet", description="3D CT volume classification (ResNet3D-18 +/- MHA).")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("inputs", nargs="*", help="VOLF files (predict only)")
    parser.add_argument("--config", help="key = value run configuration file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--workers", type=int)
    parser.add_argument("--tiny", action="store_true", help="reduced channels and 16x32x32 inputs")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.workers is not None:
        changes["workers"] = args.workers
    if args.tiny:
        changes["tiny"] = True
    return cfg.replace(**changes).validate() if changes else cfg


def _require_file(path: Path, what: str) -> None:
    if not path.is_file():
        raise FileNotFoundError(f"{what} not found: {path}")


def cmd_synth(cfg: RunConfig) -> int:
    spec = cfg.phantom_spec()
    manifest = data.generate_phantoms(spec, cfg.data_dir, cfg.n_per_class, cfg.n_val_per_class)
    print(f"wrote {len(manifest)} phantom volumes of dims {spec.dims} and {Path(cfg.data_dir) / 'manifest.csv'}")
    return EXIT_OK


def cmd_preprocess(cfg: RunConfig) -> int:
    manifest = data.read_manifest(cfg.manifest_path)
    out_dir = Path(cfg.preprocess_out or f"{cfg.data_dir.rstrip('/')}_preprocessed")
    prep = cfg.preprocessor()
    prep.cache = None
    rows = []
    for rec, row in zip(manifest.records(), manifest.rows):
        rel = f"volumes/{row.id}.volf"
        data.write_volume(out_dir / rel, prep(rec))
        rows.append(data.ManifestRow(row.id, rel, row.label, row.split))
    data.write_manifest(out_dir / "manifest.csv", data.Manifest(rows, out_dir))
    print(f"preprocessed {len(rows)} volumes to {prep.depth}x{prep.size[0]}x{prep.size[1]} in {out_dir}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    _require_file(cfg.manifest_path, "manifest")
    if cfg.resume:
        _require_file(Path(cfg.resume), "resume checkpoint")
    result = train.train(cfg)
    out_dir = Path(cfg.out_dir)
    if cfg.figures:
        plotting.loss_curve(train.read_log(result.log_path), out_dir / "loss.png")
    print(f"steps: {len(result.losses)}  final loss: {result.losses[-1]:.6f}" if result.losses else "no steps run")
    if result.best_report is not None:
        print(f"best epoch: {result.best_epoch}  val macro F1: {result.best_macro_f1:.4f}")
    print(f"log: {result.log_path}  checkpoints: {out_dir}")
    return EXIT_OK


def _checkpoint_path(cfg: RunConfig) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.out_dir) / "best.vnck"


def cmd_eval(cfg: RunConfig) -> int:
    ckpt = _checkpoint_path(cfg)
    _require_file(ckpt, "checkpoint")
    _require_file(cfg.manifest_path, "manifest")
    mp, _ = load_model(ckpt)
    manifest = data.read_manifest(cfg.manifest_path)
    if cfg.eval_split != "all":
        manifest = manifest.split(cfg.eval_split)
    if not len(manifest):
        raise ValueError(f"no records in split {cfg.eval_split!r}")
    report = train.evaluate_records(mp, manifest.records(), cfg.preprocessor(), cfg.batch_size,
                                    cfg.threshold, cfg.workers)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "eval_report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.to_text())
    return EXIT_OK


def cmd_predict(cfg: RunConfig, inputs: list[str]) -> int:
    ckpt = _checkpoint_path(cfg)
    _require_file(ckpt, "checkpoint")
    if inputs:
        for p in inputs:
            _require_file(Path(p), "volume")
        records = [data.VolumeRecord(Path(p).stem, 0, path=Path(p)) for p in inputs]
    else:
        _require_file(cfg.manifest_path, "manifest")
        manifest = data.read_manifest(cfg.manifest_path)
        if cfg.eval_split != "all":
            manifest = manifest.split(cfg.eval_split)
        records = manifest.records()
    mp, _ = load_model(ckpt)
    probs, _, ids = train.predict_records(mp, records, cfg.preprocessor(), cfg.batch_size, cfg.workers)
    for rid, p in zip(ids, probs):
        print(f"{rid} {p:.6f} {int(p >= cfg.threshold)}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    results = gradcheck.run_checks(cfg.gradcheck_scope, cfg.seed)
    print(f"{'check':<30}  {'max_rel_err':>12}  {'seconds':>8}  result")
    for r in results:
        print(f"{r.name:<30}  {r.max_rel_err:>12.3e}  {r.seconds:>8.2f}  {'PASS' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed (tolerance {gradcheck.TOLERANCE:g})")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_ablate(cfg: RunConfig) -> int:
    _require_file(cfg.manifest_path, "manifest")
    rows = train.ablate(cfg)
    out_dir = Path(cfg.out_dir)
    (out_dir / "ablation.csv").write_text(train.table_csv(rows), encoding="utf-8")
    payload = [{"architecture": r.architecture, "variant": r.variant, "best_epoch": r.best_epoch,
                **r.report.to_dict()} for r in rows]
    (out_dir / "ablation.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    if cfg.figures:
        plotting.ablation_bars(
            [(r.architecture, r.report.recall_pos, r.report.precision_pos, r.report.macro_f1) for r in rows],
            out_dir / "ablation.png",
        )
    print(train.format_table(rows))
    return EXIT_OK


def _thread_limit():
    limit = os.environ.get("VOLNET_THREADS")
    if not limit:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(limit))


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.inputs and args.command != "predict":
            raise UsageError(f"{args.command} takes no positional arguments")
        cfg = resolve_config(args)
    except (UsageError, ConfigError) as err:
        print(f"volnet: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    handlers = {
        "synth": lambda: cmd_synth(cfg),
        "preprocess": lambda: cmd_preprocess(cfg),
        "train": lambda: cmd_train(cfg),
        "eval": lambda: cmd_eval(cfg),
        "predict": lambda: cmd_predict(cfg, args.inputs),
        "gradcheck": lambda: cmd_gradcheck(cfg),
        "ablate": lambda: cmd_ablate(cfg),
    }
    try:
        with _thread_limit():
            return handlers[args.command]()
    except train.NumericError as err:
        print(f"volnet: numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except KeyError as err:
        if args.command == "gradcheck":
            print(f"volnet: error: {err.args[0]}", file=sys.stderr)
            return EXIT_USAGE
        raise
    except (OSError, ValueError, data.DataError, checkpoint.CheckpointError, GeometryError) as err:
        print(f"volnet: data error: {err}", file=sys.stderr)
        return EXIT_DATA


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
