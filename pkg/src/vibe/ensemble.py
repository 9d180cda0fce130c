"""Seed ensembles: train identical models with different seeds and average their outputs."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import Dataset, write_tensor
from .model import predict, save_checkpoint
from .trainer import TrainConfig, TrainingDiverged, train

log = logging.getLogger(__name__)


class EnsembleError(ValueError):
    pass


@dataclass
class EnsembleSpec:
    n_members: int = 5
    base_seed: int = 0

    def __post_init__(self):
        if self.n_members < 1:
            raise EnsembleError("an ensemble needs at least one member")

    @property
    def seeds(self) -> list[int]:
        return [self.base_seed + i for i in range(self.n_members)]


def ensemble_predict(member_predictions) -> np.ndarray:
    """Element-wise mean of equally shaped member predictions."""
    members = [np.asarray(m) for m in member_predictions]
    if not members:
        raise EnsembleError("no member predictions to average")
    shape = members[0].shape
    for i, m in enumerate(members):
        if m.shape != shape:
            raise EnsembleError(f"member {i} has shape {m.shape}, expected {shape}")
    acc = np.zeros(shape, dtype=np.float64)
    for m in members:
        acc += m
    return (acc / len(members)).astype(np.result_type(members[0].dtype, np.float32))


@dataclass
class Member:
    seed: int
    params: dict
    model_cfg: object
    log: object
    predictions: dict  # run id -> T x P


def _train_member(ds: Dataset, cfg: TrainConfig, seed: int, runs) -> Member:
    try:
        params, mcfg, tlog = train(ds, cfg.replace(seed=seed))
    except TrainingDiverged as exc:
        raise TrainingDiverged(f"ensemble member with seed {seed} diverged: {exc}") from exc
    preds = {r.run_id: predict(r, params, mcfg) for r in runs}
    return Member(seed, params, mcfg, tlog, preds)


def run_ensemble(ds: Dataset, cfg: TrainConfig, spec: EnsembleSpec | None = None, eval_runs=None,
                 jobs: int = 1, out_dir=None):
    """Train every member, average their predictions on ``eval_runs`` (default: val + test).

    Returns ``(members, ensembled)`` where ``ensembled`` maps run id to the averaged prediction.
    """
    spec = spec or EnsembleSpec()
    if len(set(spec.seeds)) != len(spec.seeds):
        raise EnsembleError("member seeds must be distinct")
    runs = list(eval_runs) if eval_runs is not None else ds.val + ds.test
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_train_member, ds, cfg, s, runs) for s in spec.seeds]
            members = [f.result() for f in futures]
    else:
        members = [_train_member(ds, cfg, s, runs) for s in spec.seeds]
    ensembled = {r.run_id: ensemble_predict([m.predictions[r.run_id] for m in members]) for r in runs}
    if out_dir is not None:
        write_ensemble(out_dir, members, ensembled, primary=runs[0].run_id if runs else None)
    return members, ensembled


def write_ensemble(out_dir, members: list[Member], ensembled: dict, primary: str | None = None) -> Path:
    """Layout: ``member_<seed>/checkpoint``, ``member_<seed>/predictions/<run>.vten``,
    ``ensemble/predictions/<run>.vten`` and ``ensemble/predictions.vten`` for the first run."""
    out = Path(out_dir)
    for m in members:
        mdir = out / f"member_{m.seed}"
        save_checkpoint(mdir / "checkpoint", m.params, m.model_cfg,
                        {"seed": m.seed, "best_epoch": m.log.best_epoch, "stop_epoch": m.log.stop_epoch})
        (mdir / "train_log.txt").write_text(m.log.to_text())
        (mdir / "predictions").mkdir(parents=True, exist_ok=True)
        for run_id, p in m.predictions.items():
            write_tensor(mdir / "predictions" / f"{run_id}.vten", p)
    edir = out / "ensemble"
    (edir / "predictions").mkdir(parents=True, exist_ok=True)
    for run_id, p in ensembled.items():
        write_tensor(edir / "predictions" / f"{run_id}.vten", p)
    if primary is not None:
        write_tensor(edir / "predictions.vten", ensembled[primary])
    return out
