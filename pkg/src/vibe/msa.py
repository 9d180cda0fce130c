"""Multi-perturbation Shapley attribution of feature sets to parcel-wise accuracy.

Players are feature sets; a coalition keeps its members intact and lesions
every other set.  The value of a coalition is the per-parcel Pearson r of
the trained model on the evaluation runs, so each Shapley value is a
``P``-vector.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .dataio import NETWORKS, FeatureBundle, ParcelAtlas, RunSample, write_tensor
from .evaluation import parcelwise_pearson
from .model import predict

LESION_MODES = ("mean", "zero")
MAX_EXACT_PLAYERS = 16


class AttributionError(ValueError):
    pass


def training_means(runs: list[RunSample], set_names) -> dict[str, np.ndarray]:
    """Per-dimension mean of every feature set over the TRs of runs where it is present."""
    means = {}
    for name in set_names:
        mats = [np.asarray(r.bundle.features[name], dtype=np.float64) for r in runs
                if name in r.bundle.features and r.bundle.present.get(name, True)]
        if mats:
            means[name] = np.concatenate(mats).mean(axis=0)
        else:
            dim = next(r.bundle.features[name].shape[1] for r in runs if name in r.bundle.features)
            means[name] = np.zeros(dim)
    return means


def lesion(bundle: FeatureBundle, set_name: str, mode: str = "mean", means: dict | None = None) -> FeatureBundle:
    """Copy of ``bundle`` with one feature set replaced by zeros or its training mean."""
    if set_name not in bundle.features:
        raise AttributionError(f"unknown feature set {set_name!r}; bundle has {sorted(bundle.features)}")
    if mode not in LESION_MODES:
        raise AttributionError(f"lesion mode must be one of {LESION_MODES}, got {mode!r}")
    x = np.asarray(bundle.features[set_name])
    if mode == "zero":
        repl = np.zeros_like(x)
    else:
        if means is None or set_name not in means:
            raise AttributionError(f"mean lesion of {set_name!r} needs its training mean")
        repl = np.broadcast_to(np.asarray(means[set_name], dtype=x.dtype), x.shape).copy()
    return bundle.replace(set_name, repl)


def coalitions(k: int):
    """All coalitions of ``k`` players as boolean tuples."""
    return [tuple(bool(c >> i & 1) for i in range(k)) for c in range(1 << k)]


class CoalitionGame:
    """Memoised coalition values ``v(S)``; safe for concurrent insertion of distinct keys."""

    def __init__(self, n_players: int, value_fn: Callable[[tuple], np.ndarray], names=None):
        self.n_players = n_players
        self.names = list(names) if names is not None else [f"player{i}" for i in range(n_players)]
        self._fn = value_fn
        self.cache: dict[tuple, np.ndarray] = {}
        self._lock = threading.Lock()

    def __call__(self, coalition) -> np.ndarray:
        key = tuple(bool(b) for b in coalition)
        if len(key) != self.n_players:
            raise AttributionError(f"coalition has {len(key)} entries, game has {self.n_players} players")
        with self._lock:
            hit = self.cache.get(key)
        if hit is not None:
            return hit
        val = np.asarray(self._fn(key), dtype=np.float64)
        with self._lock:
            self.cache.setdefault(key, val)
        return val


def model_game(params, model_cfg, eval_runs: list[RunSample], mode: str = "mean",
               means: dict | None = None) -> CoalitionGame:
    """Coalition game whose value is the run-averaged parcel-wise r with absent sets lesioned."""
    names = model_cfg.set_names
    if mode == "mean" and means is None:
        raise AttributionError("mean lesions need training means (see training_means)")

    def value(coal):
        rs = []
        for run in eval_runs:
            b = run.bundle
            for name, keep in zip(names, coal):
                if not keep:
                    b = lesion(b, name, mode, means)
            rs.append(parcelwise_pearson(predict(b, params, model_cfg, subject=run.subject), run.targets))
        return np.mean(rs, axis=0)

    return CoalitionGame(len(names), value, names)


def coalition_value(params, model_cfg, eval_runs, coalition, mode: str = "mean", means=None) -> np.ndarray:
    return model_game(params, model_cfg, eval_runs, mode, means)(coalition)


@dataclass
class ShapleyReport:
    phi: np.ndarray  # k x P
    v_full: np.ndarray
    v_empty: np.ndarray
    estimator: str
    names: list
    stderr: np.ndarray | None = None
    cache: dict = field(default_factory=dict)
    lesion_mode: str = ""

    def efficiency_gap(self) -> np.ndarray:
        return np.abs(self.phi.sum(axis=0) - (self.v_full - self.v_empty))


def shapley_exact(game: CoalitionGame) -> ShapleyReport:
    """Exact Shapley values by enumerating all ``2**k`` coalitions."""
    k = game.n_players
    if k > MAX_EXACT_PLAYERS:
        raise AttributionError(f"{k} players needs 2**{k} evaluations; use shapley_sampled instead")
    values = {c: game(c) for c in coalitions(k)}
    full = tuple([True] * k)
    empty = tuple([False] * k)
    P = values[full].shape[0]
    phi = np.zeros((k, P))
    fact = [math.factorial(n) for n in range(k + 1)]
    for c, v in values.items():
        size = sum(c)
        for i in range(k):
            if c[i]:
                continue
            with_i = list(c)
            with_i[i] = True
            w = fact[size] * fact[k - size - 1] / fact[k]
            phi[i] += w * (values[tuple(with_i)] - v)
    return ShapleyReport(phi, values[full], values[empty], "exact", list(game.names), None, dict(game.cache))


def shapley_sampled(game: CoalitionGame, n_permutations: int, seed: int = 0, permutations=None) -> ShapleyReport:
    """Mean marginal contribution over random player orderings, with per-entry standard errors.

    ``permutations`` replaces random sampling with an explicit list of orderings.
    """
    k = game.n_players
    if permutations is None:
        if n_permutations < 1:
            raise AttributionError("need at least one permutation")
        rng = np.random.default_rng(seed)
        permutations = [rng.permutation(k) for _ in range(n_permutations)]
    permutations = [list(p) for p in permutations]
    M = len(permutations)
    empty = tuple([False] * k)
    v0 = game(empty)
    P = v0.shape[0]
    total = np.zeros((k, P))
    total_sq = np.zeros((k, P))
    for perm in permutations:
        coal = [False] * k
        prev = v0
        for i in perm:
            coal[i] = True
            cur = game(tuple(coal))
            d = cur - prev
            total[i] += d
            total_sq[i] += d * d
            prev = cur
    phi = total / M
    if M > 1:
        var = np.maximum(total_sq / M - phi * phi, 0.0) * M / (M - 1)
        stderr = np.sqrt(var / M)
    else:
        stderr = np.zeros_like(phi)
    full = game(tuple([True] * k))
    return ShapleyReport(phi, full, v0, f"sampled({M})", list(game.names), stderr, dict(game.cache))


def network_contributions(report: ShapleyReport, atlas: ParcelAtlas) -> dict:
    """Mean contribution of each feature set within each network (``None`` if the network is empty)."""
    out = {}
    for i, name in enumerate(report.names):
        row = {}
        for j, net in enumerate(atlas.names):
            sel = atlas.network_of == j
            row[net] = float(report.phi[i, sel].mean()) if sel.any() else None
        out[name] = row
    return out


def write_shapley_report(report: ShapleyReport, out_dir, atlas: ParcelAtlas | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / "phi.vten", report.phi.astype(np.float64))
    if report.stderr is not None:
        write_tensor(out / "phi_stderr.vten", report.stderr.astype(np.float64))
    lines = [f"estimator: {report.estimator}", f"lesion: {report.lesion_mode}",
             f"sets: {','.join(report.names)}", f"parcels: {report.phi.shape[1]}",
             f"v_full_mean: {report.v_full.mean():.6f}", f"v_empty_mean: {report.v_empty.mean():.6f}",
             f"efficiency_max_gap: {report.efficiency_gap().max():.3e}"]
    for i, name in enumerate(report.names):
        lines.append(f"mean_contribution.{name}: {report.phi[i].mean():.6f}")
    if atlas is not None:
        for name, row in network_contributions(report, atlas).items():
            for net in NETWORKS:
                val = row.get(net)
                lines.append(f"network.{net}.{name}: {'absent' if val is None else f'{val:.6f}'}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    return out

