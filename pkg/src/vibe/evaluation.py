"""Parcel-wise Pearson evaluation, network summaries and report files."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import NETWORKS, ParcelAtlas


class EvalError(ValueError):
    pass


# relative spread below which a column is treated as constant
_CONST_TOL = 1e-12


def parcelwise_pearson(pred, target) -> np.ndarray:
    """Pearson r per column over time; a constant column on either side scores 0."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise EvalError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if pred.ndim != 2 or pred.shape[0] < 2:
        raise EvalError(f"need a T x P array with T >= 2, got {pred.shape}")
    pc = pred - pred.mean(axis=0)
    tc = target - target.mean(axis=0)
    sp = np.sqrt((pc * pc).sum(axis=0))
    st = np.sqrt((tc * tc).sum(axis=0))
    scale_p = np.maximum(np.abs(pred).max(axis=0), 1.0)
    scale_t = np.maximum(np.abs(target).max(axis=0), 1.0)
    ok = (sp > _CONST_TOL * scale_p) & (st > _CONST_TOL * scale_t)
    r = np.zeros(pred.shape[1])
    r[ok] = (pc[:, ok] * tc[:, ok]).sum(axis=0) / (sp[ok] * st[ok])
    return np.clip(r, -1.0, 1.0)


def mean_pearson(preds: list, targets: list) -> np.ndarray:
    """Per-parcel r averaged over runs with equal weight."""
    if not preds:
        raise EvalError("no runs to evaluate")
    return np.mean([parcelwise_pearson(p, t) for p, t in zip(preds, targets)], axis=0)


def network_summary(r, atlas: ParcelAtlas):
    """Mean r per network (``None`` for empty networks) and parcel counts."""
    r = np.asarray(r, dtype=np.float64)
    if len(r) != atlas.n_parcels:
        raise EvalError(f"{len(r)} parcel scores but atlas has {atlas.n_parcels} parcels")
    means, counts = {}, {}
    for i, name in enumerate(atlas.names):
        sel = atlas.network_of == i
        counts[name] = int(sel.sum())
        means[name] = float(r[sel].mean()) if sel.any() else None
    return means, counts


@dataclass
class EvalReport:
    r: np.ndarray
    atlas: ParcelAtlas
    per_run: dict = field(default_factory=dict)

    @property
    def mean_r(self) -> float:
        return float(np.mean(self.r))

    @property
    def network_means(self) -> dict:
        return network_summary(self.r, self.atlas)[0]


def evaluate(preds: dict, targets: dict, atlas: ParcelAtlas) -> EvalReport:
    """Score predictions keyed by run id against the matching targets."""
    if not preds:
        raise EvalError("no runs to evaluate")
    missing = sorted(set(preds) - set(targets))
    if missing:
        raise EvalError(f"no targets for runs: {', '.join(missing)}")
    per_run = {k: parcelwise_pearson(preds[k], targets[k]) for k in sorted(preds)}
    r = np.mean(list(per_run.values()), axis=0)
    return EvalReport(r, atlas, per_run)


def write_report(report: EvalReport, path) -> tuple[Path, Path]:
    """Write ``<path>.csv`` (parcel,network,r) and ``<path>.txt`` summary."""
    if not report.per_run:
        raise EvalError("report has no runs; refusing to write an empty report")
    base = Path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    csv_path = base.with_suffix(".csv")
    txt_path = base.with_suffix(".txt")
    lines = ["parcel,network,r"]
    for p, val in enumerate(report.r):
        lines.append(f"{p},{report.atlas.names[report.atlas.network_of[p]]},{val:.6f}")
    csv_path.write_text("\n".join(lines) + "\n")
    means, counts = network_summary(report.r, report.atlas)
    out = [f"runs: {','.join(report.per_run)}", f"parcels: {len(report.r)}", f"mean_r: {report.mean_r:.6f}"]
    for name in NETWORKS:
        m = means.get(name)
        out.append(f"network.{name}: {'absent' if m is None else f'{m:.6f}'} (n={counts.get(name, 0)})")
    for run, r in report.per_run.items():
        out.append(f"run.{run}: {float(np.mean(r)):.6f}")
    txt_path.write_text("\n".join(out) + "\n")
    return csv_path, txt_path


def read_report_csv(path) -> np.ndarray:
    rows = Path(path).read_text().strip().splitlines()
    if rows[0] != "parcel,network,r":
        raise EvalError(f"{path}: unexpected header {rows[0]!r}")
    return np.array([float(line.rsplit(",", 1)[1]) for line in rows[1:]])
