"""Correlation loss, AdamW with cosine decay, early stopping and network specialists."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataio import ConfigError, Dataset, FormatError, ParcelAtlas, RunSample, canonical_network, read_kv
from .evaluation import parcelwise_pearson
from .model import HrfConfig, ModelConfig, forward, init_params, predict

log = logging.getLogger(__name__)

# named random sub-streams derived from one seed
STREAM_INIT = 0
STREAM_BATCH = 1
STREAM_SAMPLING = 2


def substream(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream)])


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    max_epochs: int = 15
    batch_size: int = 4
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    clip_norm: float = 5.0
    lambda_mse: float = 0.03
    patience: int = 2
    seed: int = 0
    mask: str = "none"
    network: str = "all"  # restrict the loss to one functional network
    hrf: str = "off"  # off | fixed | learned ("on" means fixed)
    chunk_len: int = 0  # 0 trains on whole runs; otherwise split runs into windows of this many TRs
    d_model: int = 256
    ffn_mult: int = 2

    def __post_init__(self):
        positive = ("max_epochs", "batch_size", "lr", "clip_norm", "patience")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0 or self.lambda_mse < 0 or self.chunk_len < 0:
            raise ConfigError("weight_decay, lambda_mse and chunk_len must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.mask not in ("none", "causal"):
            raise ConfigError(f"mask must be none or causal, got {self.mask!r}")
        if self.hrf == "on":
            self.hrf = "fixed"
        if self.hrf not in ("off", "fixed", "learned"):
            raise ConfigError(f"hrf must be off, fixed or learned, got {self.hrf!r}")
        if self.network != "all":
            try:
                self.network = canonical_network(self.network)
            except FormatError as exc:
                raise ConfigError(str(exc)) from None

    @property
    def betas(self) -> tuple[float, float]:
        return (self.beta1, self.beta2)

    def hrf_config(self) -> HrfConfig:
        return HrfConfig(enabled=self.hrf != "off", mode="fixed" if self.hrf == "off" else self.hrf)

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **kw})

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "TrainConfig":
        raw = read_kv(path) if path else {}
        raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_strings(raw)

    @classmethod
    def from_strings(cls, raw: dict) -> "TrainConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for k, v in raw.items():
            if k not in kinds:
                raise ConfigError(f"unknown training option {k!r}")
            kind = kinds[k]
            try:
                if kind == "int":
                    kw[k] = int(v)
                elif kind == "float":
                    kw[k] = float(v)
                else:
                    kw[k] = str(v)
            except ValueError:
                raise ConfigError(f"bad value for {k}: {v!r}") from None
        return cls(**kw)


@dataclass
class TrainLog:
    train_loss: list = field(default_factory=list)
    val_r: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = 0
    stop_epoch: int = 0
    steps: int = 0
    seconds: float = 0.0

    @property
    def best_val_r(self) -> float:
        return self.val_r[self.best_epoch - 1] if self.best_epoch else float("nan")

    def to_text(self) -> str:
        lines = ["epoch,train_loss,val_r,lr"]
        for i, loss in enumerate(self.train_loss):
            vr = self.val_r[i] if i < len(self.val_r) else float("nan")
            lines.append(f"{i + 1},{loss:.6f},{vr:.6f},{self.lr[i]:.6e}")
        lines.append(f"best_epoch={self.best_epoch}")
        lines.append(f"stop_epoch={self.stop_epoch}")
        lines.append(f"steps={self.steps}")
        return "\n".join(lines) + "\n"


# -- loss -----------------------------------------------------------------------------------

def pearson_mse_loss(pred: Tensor, target, parcel_mask=None, lambda_mse: float = 0.03, eps: float = 1e-8,
                     return_parts: bool = False):
    """``(1 - mean_p r_p) + lambda * MSE`` over the parcels selected by ``parcel_mask``.

    Correlations run over the time axis with ``eps`` added to both sums of squares.
    """
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    T, P = pred.shape
    if T < 2:
        raise ValueError("correlation loss needs at least 2 time points")
    mask = np.ones(P, dtype=bool) if parcel_mask is None else np.asarray(parcel_mask, dtype=bool)
    if mask.shape != (P,):
        raise ValueError(f"parcel mask has shape {mask.shape}, expected ({P},)")
    n_on = int(mask.sum())
    if n_on == 0:
        raise ValueError("parcel mask excludes every parcel")
    m = Tensor(mask.astype(pred.dtype))
    pc = pred - pred.mean(axis=0, keepdims=True)
    tc = target - target.mean(axis=0, keepdims=True)
    cov = (pc * Tensor(tc)).sum(axis=0)
    ss_p = (pc * pc).sum(axis=0)
    ss_t = (tc * tc).sum(axis=0)
    r = cov / ad.sqrt((ss_p + eps) * Tensor(ss_t + eps))
    l_pearson = 1.0 - (r * m).sum() * (1.0 / n_on)
    diff = pred - Tensor(target)
    l_mse = ((diff * diff) * m).sum() * (1.0 / (T * n_on))
    total = l_pearson + lambda_mse * l_mse
    if return_parts:
        return total, l_pearson, l_mse
    return total


# -- optimisation -----------------------------------------------------------------------------

def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps <= 0:
        return base_lr
    step = min(max(step, 0), total_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def clip_grad_norm(grads: dict, max_norm: float = 5.0):
    """Scale all gradients so their global l2 norm is at most ``max_norm``; returns (grads, norm)."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if not math.isfinite(total):
        raise TrainingDiverged("gradient norm is not finite")
    if total > max_norm:
        scale = max_norm / total
        grads = {k: (g * scale).astype(g.dtype, copy=False) for k, g in grads.items()}
    return grads, total


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamState, lr: float, betas=(0.9, 0.999),
               weight_decay: float = 1e-4, eps: float = 1e-8) -> AdamState:
    """One decoupled-weight-decay Adam update; parameters are replaced, not mutated in place."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient for parameter {name}")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        new = p.data * (1.0 - lr * weight_decay)
        new = new - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = new.astype(p.dtype, copy=False)
    return state


# -- training loop ----------------------------------------------------------------------------

def network_mask(atlas: ParcelAtlas, network: str) -> np.ndarray:
    if network == "all":
        return np.ones(atlas.n_parcels, dtype=bool)
    m = atlas.mask(network)
    if not m.any():
        raise ConfigError(f"atlas has no parcels in network {network}")
    return m


def model_config_for(ds: Dataset, cfg: TrainConfig) -> ModelConfig:
    return ModelConfig(features=tuple(ds.specs), n_subjects=ds.n_subjects, n_parcels=ds.atlas.n_parcels,
                       d_model=cfg.d_model, ffn_mult=cfg.ffn_mult, tr=ds.runs[0].bundle.tr,
                       mask=cfg.mask, hrf=cfg.hrf_config())


def _chunks(runs: list[RunSample], chunk_len: int) -> list[RunSample]:
    if chunk_len <= 0:
        return list(runs)
    out = []
    for r in runs:
        for s in range(0, r.bundle.n_tr - 1, chunk_len):
            e = min(s + chunk_len, r.bundle.n_tr)
            if e - s < 2:
                continue
            feats = {k: v[s:e] for k, v in r.bundle.features.items()}
            b = type(r.bundle)(feats, dict(r.bundle.present), r.bundle.tr, f"{r.run_id}@{s}")
            out.append(RunSample(b, r.subject, r.targets[s:e], r.split))
    return out


def steps_per_epoch(n_items: int, batch_size: int) -> int:
    return -(-n_items // batch_size)


def validation_r(params, mcfg: ModelConfig, runs: list[RunSample], mask: np.ndarray) -> float:
    rs = [parcelwise_pearson(predict(r, params, mcfg), r.targets) for r in runs]
    return float(np.mean(rs, axis=0)[mask].mean())


def _snapshot(params: dict) -> dict:
    return {k: Tensor(v.data.copy(), True, v.dtype, k) for k, v in params.items()}


def _run_epochs(params, mcfg, items, cfg: TrainConfig, mask, n_epochs, total_steps, rng, state,
                log_: TrainLog, val_runs=None, on_epoch=None):
    spe = steps_per_epoch(len(items), cfg.batch_size)
    best = -np.inf
    best_params = _snapshot(params)
    since_best = 0
    for epoch in range(1, n_epochs + 1):
        order = rng.permutation(len(items))
        losses = []
        for b in range(spe):
            batch = [items[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            lr = cosine_lr(log_.steps, total_steps, cfg.lr)
            try:
                loss = None
                for sample in batch:
                    pred = forward(sample, params, mcfg)
                    li = pearson_mse_loss(pred, sample.targets, mask, cfg.lambda_mse)
                    loss = li if loss is None else loss + li
                loss = loss * (1.0 / len(batch))
                ad.backward(loss)
            except ad.NonFiniteError as exc:
                raise TrainingDiverged(f"seed {cfg.seed}, epoch {epoch}: {exc}") from exc
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            ad.zero_grad(params.values())
            grads, _ = clip_grad_norm(grads, cfg.clip_norm)
            adamw_step(params, grads, state, lr, cfg.betas, cfg.weight_decay)
            log_.steps += 1
            losses.append(loss.item())
        log_.train_loss.append(float(np.mean(losses)))
        log_.lr.append(cosine_lr(log_.steps, total_steps, cfg.lr))
        if val_runs is not None:
            vr = validation_r(params, mcfg, val_runs, mask)
            log_.val_r.append(vr)
            log.info("epoch %d loss %.4f val_r %.4f", epoch, log_.train_loss[-1], vr)
            if vr > best:
                best, since_best = vr, 0
                log_.best_epoch = epoch
                best_params = _snapshot(params)
            else:
                since_best += 1
            log_.stop_epoch = epoch
            if on_epoch:
                on_epoch(epoch, log_)
            if since_best >= cfg.patience:
                break
        else:
            log.info("epoch %d loss %.4f", epoch, log_.train_loss[-1])
            log_.stop_epoch = epoch
    return best_params if val_runs is not None else params


def train(ds: Dataset, cfg: TrainConfig, train_runs=None, val_runs=None, on_epoch=None):
    """Train with early stopping on validation Pearson r; returns (best params, model config, log)."""
    train_runs = ds.train if train_runs is None else train_runs
    val_runs = ds.val if val_runs is None else val_runs
    if not train_runs:
        raise ConfigError("training set is empty")
    if not val_runs:
        raise ConfigError("validation set is empty")
    if {r.run_id for r in train_runs} & {r.run_id for r in val_runs}:
        raise ConfigError("validation runs overlap training runs")
    mcfg = model_config_for(ds, cfg)
    mask = network_mask(ds.atlas, cfg.network)
    params = init_params(mcfg, substream(cfg.seed, STREAM_INIT))
    items = _chunks(train_runs, cfg.chunk_len)
    total = cfg.max_epochs * steps_per_epoch(len(items), cfg.batch_size)
    log_ = TrainLog()
    t0 = time.perf_counter()
    best = _run_epochs(params, mcfg, items, cfg, mask, cfg.max_epochs, total,
                       substream(cfg.seed, STREAM_BATCH), AdamState(), log_, val_runs, on_epoch)
    log_.seconds = time.perf_counter() - t0
    return best, mcfg, log_


def retrain_full(ds: Dataset, stop_epoch: int, cfg: TrainConfig, runs=None):
    """Train for exactly ``stop_epoch`` epochs on training plus validation runs, no early stopping.

    The learning-rate schedule keeps the ``max_epochs`` horizon of the original run.
    """
    if stop_epoch < 1:
        raise ConfigError(f"stop_epoch must be >= 1, got {stop_epoch}")
    runs = ds.train + ds.val if runs is None else runs
    if not runs:
        raise ConfigError("training set is empty")
    mcfg = model_config_for(ds, cfg)
    mask = network_mask(ds.atlas, cfg.network)
    params = init_params(mcfg, substream(cfg.seed, STREAM_INIT))
    items = _chunks(runs, cfg.chunk_len)
    horizon = max(cfg.max_epochs, stop_epoch)
    total = horizon * steps_per_epoch(len(items), cfg.batch_size)
    log_ = TrainLog()
    t0 = time.perf_counter()
    params = _run_epochs(params, mcfg, items, cfg, mask, stop_epoch, total,
                         substream(cfg.seed, STREAM_BATCH), AdamState(), log_)
    log_.seconds = time.perf_counter() - t0
    return params, mcfg, log_


def stitch_networks(pred_all, pred_visual, pred_default, atlas: ParcelAtlas) -> np.ndarray:
    """Visual columns from the Visual specialist, Default columns from the Default one, rest from the full model."""
    pred_all = np.asarray(pred_all)
    pred_visual = np.asarray(pred_visual)
    pred_default = np.asarray(pred_default)
    if not (pred_all.shape == pred_visual.shape == pred_default.shape):
        raise ValueError(f"prediction shapes differ: {pred_all.shape}, {pred_visual.shape}, {pred_default.shape}")
    if pred_all.shape[-1] != atlas.n_parcels:
        raise ValueError(f"predictions have {pred_all.shape[-1]} parcels, atlas {atlas.n_parcels}")
    out = pred_all.copy()
    vis = atlas.mask("Visual")
    dmn = atlas.mask("Default")
    out[..., vis] = pred_visual[..., vis]
    out[..., dmn] = pred_default[..., dmn]
    return out

