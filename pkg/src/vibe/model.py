"""Two-stage encoder: per-TR modality fusion followed by a temporal transformer.

Each feature set is linearly projected to ``d_proj`` and joined by a subject
token.  A single encoder layer attends across these tokens within every TR
(never across time); the feature-set outputs are concatenated, adapted to
``d_model`` and passed through two temporal encoder layers whose queries
and keys carry rotary position embeddings.  A linear head maps to parcels,
optionally followed by a causal HRF convolution.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataio import FeatureBundle, FeatureSpec, RunSample, read_kv, read_tensor, write_kv, write_tensor
from .hrf import convolve_predictions, hrf_kernel  # noqa: F401  (re-exported)

NEG_INF = -1e9
MASK_MODES = ("none", "causal")
HRF_MODES = ("fixed", "learned")


class ModelConfigError(ValueError):
    pass


@dataclass
class HrfConfig:
    enabled: bool = False
    mode: str = "fixed"
    length: int = 22  # taps; 32 s at TR 1.49

    def __post_init__(self):
        if self.mode not in HRF_MODES:
            raise ModelConfigError(f"hrf mode must be one of {HRF_MODES}, got {self.mode!r}")
        if self.length < 1:
            raise ModelConfigError("hrf kernel length must be >= 1")


@dataclass
class ModelConfig:
    features: tuple
    n_subjects: int
    n_parcels: int
    d_proj: int = 256
    d_model: int = 256
    n_heads: int = 4
    ffn_mult: int = 2
    n_pred_layers: int = 2
    rope_base: float = 10000.0
    tr: float = 1.49
    mask: str = "none"
    hrf: HrfConfig = field(default_factory=HrfConfig)

    def __post_init__(self):
        self.features = tuple(f if isinstance(f, FeatureSpec) else FeatureSpec(**f) for f in self.features)
        if isinstance(self.hrf, dict):
            self.hrf = HrfConfig(**self.hrf)
        if self.mask not in MASK_MODES:
            raise ModelConfigError(f"mask must be one of {MASK_MODES}, got {self.mask!r}")
        for width in (self.d_proj, self.d_model):
            if width % self.n_heads:
                raise ModelConfigError(f"{self.n_heads} heads do not divide width {width}")
        if (self.d_model // self.n_heads) % 2:
            raise ModelConfigError("rotary embeddings need an even head dimension")

    @property
    def set_names(self) -> list[str]:
        return [f.name for f in self.features]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


# -- parameters ----------------------------------------------------------------------------

def _linear(params, rng, name, fan_in, fan_out, dtype, bias=True):
    bound = 1.0 / math.sqrt(fan_in)
    params[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), True, dtype, f"{name}.w")
    if bias:
        params[f"{name}.b"] = Tensor(rng.uniform(-bound, bound, (fan_out,)), True, dtype, f"{name}.b")


def _norm(params, name, width, dtype):
    params[f"{name}.g"] = Tensor(np.ones(width), True, dtype, f"{name}.g")
    params[f"{name}.b"] = Tensor(np.zeros(width), True, dtype, f"{name}.b")


def _encoder_layer(params, rng, name, width, ffn_mult, dtype, key_bias=True):
    _norm(params, f"{name}.ln1", width, dtype)
    for proj in ("q", "k", "v", "o"):
        _linear(params, rng, f"{name}.attn.{proj}", width, width, dtype, bias=key_bias or proj != "k")
    _norm(params, f"{name}.ln2", width, dtype)
    _linear(params, rng, f"{name}.ff1", width, ffn_mult * width, dtype)
    _linear(params, rng, f"{name}.ff2", ffn_mult * width, width, dtype)


def init_params(cfg: ModelConfig, seed: int | np.random.Generator = 0, dtype=np.float32) -> dict[str, Tensor]:
    """Fresh parameters: uniform(+-1/sqrt(fan_in)) for linear maps, N(0, 0.02) embeddings."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for spec in cfg.features:
        _linear(params, rng, f"proj.{spec.name}", spec.dim + int(spec.optional), cfg.d_proj, dtype)
    params["subject_emb"] = Tensor(0.02 * rng.standard_normal((cfg.n_subjects, cfg.d_proj)), True, dtype,
                                   "subject_emb")
    # without positions a key bias only shifts each softmax row, so fusion omits it
    _encoder_layer(params, rng, "fusion", cfg.d_proj, cfg.ffn_mult, dtype, key_bias=False)
    _linear(params, rng, "adapter", len(cfg.features) * cfg.d_proj, cfg.d_model, dtype)
    for i in range(cfg.n_pred_layers):
        _encoder_layer(params, rng, f"pred{i}", cfg.d_model, cfg.ffn_mult, dtype)
    _norm(params, "final_ln", cfg.d_model, dtype)
    _linear(params, rng, "head", cfg.d_model, cfg.n_parcels, dtype)
    if cfg.hrf.enabled and cfg.hrf.mode == "learned":
        k = hrf_kernel(cfg.tr, cfg.hrf.length * cfg.tr)[: cfg.hrf.length]
        params["hrf.kernel"] = Tensor(k, True, dtype, "hrf.kernel")
    return params


def cast_params(params: dict[str, Tensor], dtype) -> dict[str, Tensor]:
    return {k: Tensor(v.data.astype(dtype), True, dtype, k) for k, v in params.items()}


# -- building blocks ------------------------------------------------------------------------

def linear(x: Tensor, params, name: str) -> Tensor:
    y = x @ params[f"{name}.w"]
    b = params.get(f"{name}.b")
    return y if b is None else y + b


def rope_tables(positions, d_head: int, base: float = 10000.0, dtype=np.float32):
    if d_head % 2:
        raise ModelConfigError(f"rotary embeddings need an even head dimension, got {d_head}")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    freqs = base ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    ang = pos * freqs[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope_rotate(x: Tensor, positions, base: float = 10000.0) -> Tensor:
    """Rotate dimension pairs ``(2i, 2i+1)`` of the last axis by ``m * base**(-2i/d)``.

    ``x`` has shape ``(..., T, d_head)`` and ``positions`` gives ``m`` for each of the T rows.
    """
    x = ad.as_tensor(x)
    d = x.shape[-1]
    cos, sin = rope_tables(positions, d, base, x.dtype)
    xd = x.data.reshape(*x.shape[:-1], d // 2, 2)
    xe, xo = xd[..., 0], xd[..., 1]
    out = np.stack((xe * cos - xo * sin, xe * sin + xo * cos), axis=-1).reshape(x.shape)

    def bw(g):
        g2 = g.reshape(*g.shape[:-1], d // 2, 2)
        ge, go = g2[..., 0], g2[..., 1]
        return (np.stack((ge * cos + go * sin, -ge * sin + go * cos), axis=-1).reshape(g.shape),)

    return ad._make(out, (x,), bw, "rope")


def attention_logits(q, k, q_pos, k_pos, base: float = 10000.0) -> np.ndarray:
    """Rotary-embedded query/key dot products ``(Tq, Tk)`` (unscaled)."""
    with ad.no_grad():
        qr = rope_rotate(q, q_pos, base).data
        kr = rope_rotate(k, k_pos, base).data
    return qr @ kr.T


def multi_head_attention(x: Tensor, params, name: str, n_heads: int, causal: bool = False,
                         rope_base: float | None = None) -> Tensor:
    """Self-attention over axis -2 of ``x`` (``B x N x d``); batch rows never interact."""
    b, n, d = x.shape
    dh = d // n_heads

    def heads(t):
        return ad.transpose(t.reshape(b, n, n_heads, dh), (0, 2, 1, 3))

    q = heads(linear(x, params, f"{name}.q"))
    k = heads(linear(x, params, f"{name}.k"))
    v = heads(linear(x, params, f"{name}.v"))
    if rope_base is not None:
        pos = np.arange(n)
        q = rope_rotate(q, pos, rope_base)
        k = rope_rotate(k, pos, rope_base)
    scores = (q @ ad.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    if causal:
        scores = ad.masked_fill(scores, np.triu(np.ones((n, n), dtype=bool), k=1), NEG_INF)
    weights = ad.softmax(scores, axis=-1)
    out = ad.transpose(weights @ v, (0, 2, 1, 3)).reshape(b, n, d)
    return linear(out, params, f"{name}.o")


def encoder_layer(x: Tensor, params, name: str, n_heads: int, causal: bool = False,
                  rope_base: float | None = None, eps: float = 1e-5) -> Tensor:
    h = ad.layer_norm(x, params[f"{name}.ln1.g"], params[f"{name}.ln1.b"], eps)
    x = x + multi_head_attention(h, params, f"{name}.attn", n_heads, causal, rope_base)
    h = ad.layer_norm(x, params[f"{name}.ln2.g"], params[f"{name}.ln2.b"], eps)
    h = linear(ad.gelu(linear(h, params, f"{name}.ff1")), params, f"{name}.ff2")
    return x + h


# -- forward stages ----------------------------------------------------------------------------

def _projection_input(bundle: FeatureBundle, spec: FeatureSpec, dtype) -> np.ndarray:
    if spec.name not in bundle.features:
        if not spec.optional:
            raise ModelConfigError(f"run {bundle.run_id} lacks required feature set {spec.name!r}")
        x = np.zeros((bundle.n_tr, spec.dim), dtype=dtype)
        present = False
    else:
        x = np.asarray(bundle.features[spec.name], dtype=dtype)
        present = bool(bundle.present.get(spec.name, True))
        if not present:
            x = np.zeros_like(x)
    if x.shape[1] != spec.dim:
        raise ModelConfigError(f"run {bundle.run_id}: set {spec.name!r} has {x.shape[1]} dims, expected {spec.dim}")
    if spec.optional:
        x = np.concatenate([x, np.full((len(x), 1), float(present), dtype=dtype)], axis=1)
    return x


def project(bundle: FeatureBundle, subject: int, params, cfg: ModelConfig) -> Tensor:
    """Tokens ``n_tr x (n_sets + 1) x d_proj``; the last token is the subject embedding."""
    if not 0 <= subject < cfg.n_subjects:
        raise ModelConfigError(f"unknown subject id {subject}; model has {cfg.n_subjects} subjects")
    dtype = params["subject_emb"].dtype
    toks = [linear(Tensor(_projection_input(bundle, s, dtype)), params, f"proj.{s.name}") for s in cfg.features]
    subj = params["subject_emb"][subject] + Tensor(np.zeros((bundle.n_tr, cfg.d_proj), dtype=dtype))
    return ad.stack(toks + [subj], axis=1)


def fuse(tokens: Tensor, params, cfg: ModelConfig) -> Tensor:
    """One encoder layer across the tokens of each TR; drops the subject token and concatenates."""
    t, n, d = tokens.shape
    out = encoder_layer(tokens, params, "fusion", cfg.n_heads)
    return out[:, : n - 1, :].reshape(t, (n - 1) * d)


def predict_sequence(fused: Tensor, params, cfg: ModelConfig, mask: str | None = None) -> Tensor:
    mask = cfg.mask if mask is None else mask
    if mask not in MASK_MODES:
        raise ModelConfigError(f"mask must be one of {MASK_MODES}, got {mask!r}")
    x = linear(fused, params, "adapter")
    x = x.reshape(1, *x.shape)
    for i in range(cfg.n_pred_layers):
        x = encoder_layer(x, params, f"pred{i}", cfg.n_heads, causal=mask == "causal", rope_base=cfg.rope_base)
    x = ad.layer_norm(x, params["final_ln.g"], params["final_ln.b"])
    return x.reshape(x.shape[1], x.shape[2])


def head(activations: Tensor, params) -> Tensor:
    return linear(activations, params, "head")


def output_kernel(params, cfg: ModelConfig, dtype) -> Tensor | None:
    if not cfg.hrf.enabled:
        return None
    if cfg.hrf.mode == "learned":
        return params["hrf.kernel"]
    return Tensor(hrf_kernel(cfg.tr, cfg.hrf.length * cfg.tr)[: cfg.hrf.length], dtype=dtype)


def forward(sample: RunSample | FeatureBundle, params, cfg: ModelConfig, subject: int | None = None,
            mask: str | None = None, kernel=None) -> Tensor:
    """Predictions ``n_tr x P`` for one run.

    ``kernel`` overrides the configured output convolution (used to test the delta-kernel case).
    """
    if isinstance(sample, RunSample):
        bundle, subject = sample.bundle, sample.subject if subject is None else subject
    else:
        bundle = sample
    tokens = project(bundle, subject, params, cfg)
    fused = fuse(tokens, params, cfg)
    act = predict_sequence(fused, params, cfg, mask)
    pred = head(act, params)
    if kernel is None:
        kernel = output_kernel(params, cfg, pred.dtype)
    elif not isinstance(kernel, Tensor):
        kernel = Tensor(np.asarray(kernel), dtype=pred.dtype)
    if kernel is not None:
        pred = ad.causal_conv1d(pred, kernel)
    return pred


def predict(sample, params, cfg: ModelConfig, **kw) -> np.ndarray:
    with ad.no_grad():
        return forward(sample, params, cfg, **kw).data


# -- checkpoints ---------------------------------------------------------------------------------

def save_checkpoint(path, params: dict[str, Tensor], cfg: ModelConfig, extra: dict | None = None) -> Path:
    out = Path(path)
    (out / "params").mkdir(parents=True, exist_ok=True)
    lines = {}
    for name in sorted(params):
        write_tensor(out / "params" / f"{name}.vten", params[name].data)
        lines[f"param.{name}"] = "x".join(str(s) for s in params[name].shape)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    lines["config_hash"] = cfg.digest()
    for k, v in (extra or {}).items():
        lines[k] = v
    write_kv(out / "manifest.txt", lines)
    return out


def load_checkpoint(path) -> tuple[dict[str, Tensor], ModelConfig, dict]:
    root = Path(path)
    if not (root / "manifest.txt").exists():
        raise FileNotFoundError(f"{root}: not a checkpoint (missing manifest.txt)")
    cfg = ModelConfig.from_json((root / "config.json").read_text())
    kv = read_kv(root / "manifest.txt")
    if kv.get("config_hash") != cfg.digest():
        raise ModelConfigError(f"{root}: config hash mismatch")
    params = {}
    for key, shape in kv.items():
        if not key.startswith("param."):
            continue
        name = key[len("param."):]
        arr = read_tensor(root / "params" / f"{name}.vten")
        if "x".join(str(s) for s in arr.shape) != shape:
            raise ModelConfigError(f"{root}: parameter {name} has shape {arr.shape}, manifest says {shape}")
        params[name] = Tensor(arr, True, arr.dtype, name)
    extra = {k: v for k, v in kv.items() if not k.startswith("param.") and k != "config_hash"}
    return params, cfg, extra
