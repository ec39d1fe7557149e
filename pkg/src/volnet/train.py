"""Training loop, evaluation and the plain-vs-attention ablation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from volnet import data, metrics
from volnet.config import RunConfig
from volnet.model import ModelParams, build_model, forward, load_model, save_model
from volnet.ops import stable_sigmoid
from volnet.optim import AdamState, adam_step, bce_with_logits
from volnet.tensor import Tape, Tensor

logger = logging.getLogger(__name__)

ARCH_NAMES = {"plain": "ResNet3D-18", "with_mha": "ResNet3D-18 + MHA"}
TABLE_COLUMNS = ("Architecture", "Recall", "Precision", "Macro F1 Score")


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    val_reports: dict[int, metrics.MetricsReport] = field(default_factory=dict)
    best_epoch: int = -1
    best_macro_f1: float = -1.0
    best_path: Path | None = None
    last_path: Path | None = None
    log_path: Path | None = None

    @property
    def best_report(self) -> metrics.MetricsReport | None:
        return self.val_reports.get(self.best_epoch)


def predict_records(
    mp: ModelParams,
    records: Sequence[data.VolumeRecord],
    prep: data.Preprocessor,
    batch_size: int = 4,
    workers: int = 1,
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Eval-mode probabilities for ``records`` in their given order."""
    probs, labels, ids = [], [], []
    for x, y, bid in data.make_batches(records, batch_size, prep=prep, workers=workers, shuffle=False):
        probs.append(stable_sigmoid(forward(mp, x, train=False).data.astype(np.float64)))
        labels.append(y)
        ids += bid
    return np.concatenate(probs), np.concatenate(labels).astype(int), ids


def evaluate_records(mp, records, prep, batch_size=4, threshold=0.5, workers=1) -> metrics.MetricsReport:
    probs, labels, _ = predict_records(mp, records, prep, batch_size, workers)
    return metrics.evaluate(probs, labels, threshold)


def train_step(mp: ModelParams, x: Tensor, y: np.ndarray, state: AdamState, cfg: RunConfig) -> float:
    with Tape() as tape:
        loss = bce_with_logits(forward(mp, x, train=True), Tensor(y), cfg.pos_weight)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value} at optimizer step {state.t + 1}")
    adam_step(mp.params, tape.backward(loss), state, cfg.hyperparams())
    return value


def train(cfg: RunConfig, manifest: data.Manifest | None = None) -> TrainResult:
    """Run ``cfg.epochs`` epochs of forward -> BCE -> backward -> Adam.

    Writes ``train_log.jsonl``, ``last.vnck`` and ``best.vnck`` (highest
    validation macro F1) under ``cfg.out_dir``. With ``cfg.resume`` set,
    parameters, optimizer state and the epoch counter are restored and
    training continues at the following epoch.
    """
    if manifest is None:
        manifest = data.read_manifest(cfg.manifest_path)
    train_recs = manifest.split("train").records()
    val_recs = manifest.split("val").records()
    if not train_recs:
        raise ValueError(f"{cfg.manifest_path}: no training records")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prep = cfg.preprocessor()
    hp = cfg.hyperparams()

    result = TrainResult(log_path=out_dir / "train_log.jsonl")
    start_epoch = 0
    if cfg.resume:
        mp, extra = load_model(cfg.resume)
        if mp.config != cfg.model_config():
            raise ValueError(f"resume checkpoint {cfg.resume} holds a {mp.config.variant} model of another shape")
        state = AdamState.from_tensors(extra)
        start_epoch = int(extra["meta.epoch"][0]) + 1
        result.best_macro_f1 = float(extra.get("meta.best_macro_f1", [-1.0])[0])
        result.best_epoch = int(extra.get("meta.best_epoch", [-1])[0])
        mode = "a"
    else:
        mp = build_model(cfg.model_config(), seed=cfg.seed)
        state = AdamState()
        mode = "w"

    steps_per_epoch = math.ceil(len(train_recs) / hp.batch_size)
    with open(result.log_path, mode, encoding="utf-8") as log:
        for epoch in range(start_epoch, hp.epochs):
            batches = data.make_batches(train_recs, hp.batch_size, cfg.seed, epoch, prep, cfg.workers)
            for step, (x, y, _) in enumerate(batches):
                loss = train_step(mp, x, y, state, cfg)
                result.losses.append(loss)
                log.write(json.dumps({"kind": "step", "epoch": epoch, "step": step,
                                      "global_step": epoch * steps_per_epoch + step, "loss": loss}) + "\n")
            if val_recs:
                report = evaluate_records(mp, val_recs, prep, hp.batch_size, cfg.threshold, cfg.workers)
                result.val_reports[epoch] = report
                log.write(json.dumps({"kind": "val", "epoch": epoch, **report.to_dict()}) + "\n")
                logger.info("epoch %d loss %.4f val macro F1 %.4f", epoch, loss, report.macro_f1)
                improved = report.macro_f1 > result.best_macro_f1
            else:
                improved = False
            log.flush()
            if improved:
                result.best_macro_f1, result.best_epoch = report.macro_f1, epoch
            meta = {
                "meta.epoch": np.array([epoch], dtype=np.float32),
                "meta.best_macro_f1": np.array([result.best_macro_f1], dtype=np.float32),
                "meta.best_epoch": np.array([result.best_epoch], dtype=np.float32),
            }
            if improved:
                save_model(out_dir / "best.vnck", mp, {**state.to_tensors(), **meta})
            if (epoch + 1) % cfg.checkpoint_interval == 0 or epoch == hp.epochs - 1:
                save_model(out_dir / "last.vnck", mp, {**state.to_tensors(), **meta})
    result.last_path = out_dir / "last.vnck"
    if (out_dir / "best.vnck").exists():
        result.best_path = out_dir / "best.vnck"
    return result


def read_log(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- ablation ----------------------------------------------------------------

@dataclass
class AblationRow:
    variant: str
    report: metrics.MetricsReport
    best_epoch: int

    @property
    def architecture(self) -> str:
        return ARCH_NAMES[self.variant]


def ablate(cfg: RunConfig, manifest: data.Manifest | None = None) -> list[AblationRow]:
    """Train both variants with identical seeds and data; best-epoch val metrics."""
    if manifest is None:
        manifest = data.read_manifest(cfg.manifest_path)
    rows = []
    for variant in ("plain", "with_mha"):
        sub = cfg.replace(variant=variant, out_dir=str(Path(cfg.out_dir) / variant), resume="")
        res = train(sub, manifest)
        if res.best_report is None:
            raise ValueError("ablation needs a validation split")
        rows.append(AblationRow(variant, res.best_report, res.best_epoch))
    return rows


def format_table(rows: Sequence[AblationRow]) -> str:
    header = f"{TABLE_COLUMNS[0]:<20}  {TABLE_COLUMNS[1]:>8}  {TABLE_COLUMNS[2]:>9}  {TABLE_COLUMNS[3]:>14}"
    lines = [header]
    for r in rows:
        rep = r.report
        lines.append(f"{r.architecture:<20}  {rep.recall_pos:>8.4f}  {rep.precision_pos:>9.4f}  {rep.macro_f1:>14.4f}")
    return "\n".join(lines)


def table_csv(rows: Sequence[AblationRow]) -> str:
    lines = [",".join(TABLE_COLUMNS)]
    for r in rows:
        rep = r.report
        lines.append(f"{r.architecture},{rep.recall_pos:.4f},{rep.precision_pos:.4f},{rep.macro_f1:.4f}")
    return "\n".join(lines) + "\n"
