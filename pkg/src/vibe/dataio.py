"""File formats, run containers, the parcel atlas and the synthetic dataset generator."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .hrf import convolve_predictions, hrf_kernel

NETWORKS = ("Visual", "SomMot", "SalVentAttn", "DorsAttn", "Cont", "Default", "Limbic")

_NETWORK_ALIASES = {
    "visual": "Visual", "vis": "Visual",
    "sommot": "SomMot", "somatomotor": "SomMot",
    "salventattn": "SalVentAttn", "ventralattention": "SalVentAttn",
    "dorsattn": "DorsAttn", "dorsalattention": "DorsAttn",
    "cont": "Cont", "control": "Cont", "frontoparietal": "Cont",
    "default": "Default", "dmn": "Default",
    "limbic": "Limbic",
}


class FormatError(ValueError):
    pass


class ConfigError(ValueError):
    pass


# -- VTEN tensor container ------------------------------------------------------

VTEN_MAGIC = b"VTEN"
VTEN_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_tensor(path, t) -> None:
    """Write an f32/f64 array (or Tensor) as a little-endian VTEN file."""
    arr = np.asarray(getattr(t, "data", t))
    if arr.dtype.kind != "f" or arr.dtype.itemsize not in (4, 8):
        raise FormatError(f"VTEN stores float32/float64 only, got {arr.dtype}")
    arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    if arr.ndim > 255:
        raise FormatError("rank exceeds 255")
    header = VTEN_MAGIC + struct.pack("<IBB", VTEN_VERSION, _DTYPE_CODES[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr).tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    return decode_tensor(buf, source=str(path))


def decode_tensor(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 4:
        raise FormatError(f"{source}: truncated header at byte offset {len(buf)} (need 4-byte magic)")
    if buf[:4] != VTEN_MAGIC:
        raise FormatError(f"{source}: bad magic {buf[:4]!r} at byte offset 0")
    if len(buf) < 10:
        raise FormatError(f"{source}: truncated header at byte offset {len(buf)} (need 10 bytes)")
    version, code, rank = struct.unpack_from("<IBB", buf, 4)
    if version != VTEN_VERSION:
        raise FormatError(f"{source}: unsupported version {version} at byte offset 4")
    if code not in _CODE_DTYPES:
        raise FormatError(f"{source}: unknown dtype code {code} at byte offset 8")
    off = 10
    need = off + 8 * rank
    if len(buf) < need:
        raise FormatError(f"{source}: truncated extents at byte offset {len(buf)} (expected {need})")
    shape = struct.unpack_from(f"<{rank}Q", buf, off)
    off = need
    dtype = _CODE_DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) < off + nbytes:
        raise FormatError(
            f"{source}: truncated payload at byte offset {len(buf)} (expected {off + nbytes} bytes)")
    if len(buf) > off + nbytes:
        raise FormatError(f"{source}: trailing bytes after payload at byte offset {off + nbytes}")
    return np.frombuffer(buf, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)), offset=off).reshape(shape).copy()


# -- key=value text ---------------------------------------------------------------

def read_kv(path) -> dict[str, str]:
    """Parse a ``key=value`` file; ``#`` starts a comment."""
    out: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def write_kv(path, items: dict) -> None:
    with open(path, "w") as fh:
        for k, v in items.items():
            fh.write(f"{k}={v}\n")


# -- atlas ------------------------------------------------------------------------

def canonical_network(name: str) -> str:
    key = name.strip().replace(" ", "").replace("_", "").replace("-", "").lower()
    if key not in _NETWORK_ALIASES:
        raise FormatError(f"unknown network name {name.strip()!r}; expected one of {', '.join(NETWORKS)}")
    return _NETWORK_ALIASES[key]


@dataclass
class ParcelAtlas:
    network_of: np.ndarray  # (P,) network ids into NETWORKS
    names: tuple = NETWORKS

    @property
    def n_parcels(self) -> int:
        return len(self.network_of)

    def network_id(self, name: str) -> int:
        return self.names.index(canonical_network(name))

    def mask(self, name: str) -> np.ndarray:
        return self.network_of == self.network_id(name)

    def counts(self) -> dict[str, int]:
        return {n: int((self.network_of == i).sum()) for i, n in enumerate(self.names)}


def load_atlas(path) -> ParcelAtlas:
    """Read ``index, network`` lines (one per parcel)."""
    seen: dict[int, int] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected 'index, network', got {raw.strip()!r}")
            try:
                idx = int(parts[0])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad parcel index {parts[0]!r}") from None
            try:
                net = NETWORKS.index(canonical_network(parts[1]))
            except FormatError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if idx in seen:
                raise FormatError(f"{path}:{lineno}: duplicate parcel index {idx}")
            seen[idx] = net
    if not seen:
        raise FormatError(f"{path}: no parcels")
    n = len(seen)
    if sorted(seen) != list(range(n)):
        raise FormatError(f"{path}: parcel indices must be 0..{n - 1} without gaps")
    return ParcelAtlas(np.array([seen[i] for i in range(n)], dtype=np.int64))


def write_atlas(path, atlas: ParcelAtlas) -> None:
    with open(path, "w") as fh:
        for i, net in enumerate(atlas.network_of):
            fh.write(f"{i}, {atlas.names[net]}\n")


def default_atlas(n_parcels: int = 100) -> ParcelAtlas:
    """Contiguous blocks with roughly Schaefer-7 proportions."""
    share = np.array([0.15, 0.19, 0.12, 0.13, 0.13, 0.22, 0.06])
    counts = np.floor(share * n_parcels).astype(int)
    for i in np.argsort(-share)[: n_parcels - counts.sum()]:
        counts[i] += 1
    return ParcelAtlas(np.repeat(np.arange(len(NETWORKS)), counts))


# -- run containers -------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureSpec:
    name: str
    dim: int
    optional: bool = False


@dataclass
class FeatureBundle:
    features: dict  # name -> (n_tr, D) array
    present: dict  # name -> bool
    tr: float = 1.49
    run_id: str = ""

    def __post_init__(self):
        lengths = {v.shape[0] for v in self.features.values()}
        if len(lengths) > 1:
            raise FormatError(f"run {self.run_id}: feature matrices disagree on n_tr: {sorted(lengths)}")
        for name in self.features:
            self.present.setdefault(name, True)

    @property
    def n_tr(self) -> int:
        return next(iter(self.features.values())).shape[0]

    def replace(self, name: str, matrix: np.ndarray) -> "FeatureBundle":
        feats = dict(self.features)
        feats[name] = matrix
        return FeatureBundle(feats, dict(self.present), self.tr, self.run_id)


@dataclass
class RunSample:
    bundle: FeatureBundle
    subject: int
    targets: np.ndarray | None = None
    split: str = "train"

    def __post_init__(self):
        if self.targets is not None and len(self.targets) != self.bundle.n_tr:
            raise FormatError(
                f"run {self.bundle.run_id}: targets have {len(self.targets)} TRs, features {self.bundle.n_tr}")

    @property
    def run_id(self) -> str:
        return self.bundle.run_id


@dataclass
class SyntheticTruth:
    governing: np.ndarray  # (P,) index into feature sets, -1 if unassigned
    pure: np.ndarray  # (P,) bool, True when a single set drives the parcel
    mixing: np.ndarray  # (P, k) non-negative weights
    weights: dict  # set name -> (P, D) planted projection vectors
    gain: np.ndarray  # (P,)
    kernel: np.ndarray  # temporal kernel, unit sum
    noise: float
    set_names: tuple = ()


@dataclass
class Dataset:
    specs: list
    atlas: ParcelAtlas
    runs: list
    n_subjects: int
    truth: SyntheticTruth | None = None

    @property
    def set_names(self) -> list[str]:
        return [s.name for s in self.specs]

    def split(self, name: str) -> list[RunSample]:
        return [r for r in self.runs if r.split == name]

    @property
    def train(self) -> list[RunSample]:
        return self.split("train")

    @property
    def val(self) -> list[RunSample]:
        return self.split("val")

    @property
    def test(self) -> list[RunSample]:
        return self.split("test")


# -- synthetic generator ----------------------------------------------------------------

DEFAULT_FEATURES = (
    FeatureSpec("text", 64),
    FeatureSpec("audio", 48),
    FeatureSpec("video", 48),
    FeatureSpec("extra", 16, optional=True),
)

DEFAULT_ASSIGNMENT = {"Visual": "video", "SomMot": "audio", "Default": "text"}


@dataclass
class SynthConfig:
    features: tuple = DEFAULT_FEATURES
    n_train: int = 8
    n_val: int = 1
    n_test: int = 1
    n_tr: int = 400
    n_parcels: int = 100
    n_subjects: int = 4
    noise: float = 0.0
    tr: float = 1.49
    latent_dim: int = 6
    smoothness: float = 0.8  # AR(1) coefficient of the latent stimulus drivers
    feature_noise: float = 0.1
    optional_present_every: int = 4  # optional sets present in every n-th run
    assignment: dict = field(default_factory=lambda: dict(DEFAULT_ASSIGNMENT))

    def validate(self) -> None:
        names = {f.name for f in self.features}
        for net, mod in self.assignment.items():
            canonical_network(net)
            if mod not in names:
                raise ConfigError(f"assignment {net}={mod} references unconfigured feature set {mod!r}")
        if self.n_train < 1 or self.n_tr < 2 or self.n_parcels < 1 or self.n_subjects < 1:
            raise ConfigError("n_train, n_parcels, n_subjects must be >= 1 and n_tr >= 2")
        if not 0 <= self.smoothness < 1:
            raise ConfigError("smoothness must lie in [0, 1)")


def _ar1(rng: np.random.Generator, n: int, d: int, rho: float) -> np.ndarray:
    eps = rng.standard_normal((n, d))
    z = np.empty((n, d))
    z[0] = eps[0]
    scale = np.sqrt(1 - rho * rho)
    for t in range(1, n):
        z[t] = rho * z[t - 1] + scale * eps[t]
    return z


def planted_drive(features: dict, truth: SyntheticTruth) -> np.ndarray:
    """Pre-nonlinearity drive ``sum_m mixing[p, m] * X_m @ W_m[p]`` for every parcel."""
    n = next(iter(features.values())).shape[0]
    u = np.zeros((n, len(truth.gain)))
    for m, name in enumerate(truth.set_names):
        w = truth.mixing[:, m]
        if not np.any(w):
            continue
        u += (np.asarray(features[name], dtype=np.float64) @ truth.weights[name].T) * w
    return u


def reconstruct_targets(features: dict, truth: SyntheticTruth) -> np.ndarray:
    """Noise-free targets implied by the planted truth."""
    return convolve_predictions(np.tanh(planted_drive(features, truth)), truth.kernel) * truth.gain


def gen_synthetic(cfg: SynthConfig | None = None, seed: int = 0) -> Dataset:
    """Generate a dataset whose targets are a known function of the features.

    Parcel ``p`` driven by set ``m`` receives
    ``gain_p * (k * tanh(X_m W_p))(t) + noise * eps`` with ``k`` the HRF kernel.
    Networks absent from ``cfg.assignment`` mix all non-optional sets.
    """
    cfg = cfg or SynthConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    specs = list(cfg.features)
    names = [s.name for s in specs]
    k = len(specs)
    atlas = default_atlas(cfg.n_parcels)
    P = cfg.n_parcels

    # fixed per-set mixing matrices from latent drivers to feature dims
    loadings = {s.name: rng.standard_normal((cfg.latent_dim, s.dim)) / np.sqrt(cfg.latent_dim) for s in specs}

    mixing = np.zeros((P, k))
    pure = np.zeros(P, dtype=bool)
    drivers = [i for i, s in enumerate(specs) if not s.optional]
    assign = {canonical_network(n): m for n, m in cfg.assignment.items()}
    for p in range(P):
        net = NETWORKS[atlas.network_of[p]]
        if net in assign:
            mixing[p, names.index(assign[net])] = 1.0
            pure[p] = True
        else:
            w = rng.dirichlet(np.ones(len(drivers)))
            mixing[p, drivers] = w
    governing = np.where(mixing.any(axis=1), mixing.argmax(axis=1), -1)

    feat_std = {s.name: np.sqrt(1.0 + cfg.feature_noise ** 2) for s in specs}
    weights = {}
    for s in specs:
        w = rng.standard_normal((P, s.dim))
        # unit-variance drive for unit-variance features
        weights[s.name] = w / (np.linalg.norm(w, axis=1, keepdims=True) * feat_std[s.name])
    mix_norm = np.linalg.norm(mixing, axis=1, keepdims=True)
    mixing = np.divide(mixing, mix_norm, out=np.zeros_like(mixing), where=mix_norm > 0)

    kernel = hrf_kernel(cfg.tr)
    truth = SyntheticTruth(governing, pure, mixing, weights, np.ones(P), kernel, cfg.noise, tuple(names))

    splits = ["train"] * cfg.n_train + ["val"] * cfg.n_val + ["test"] * cfg.n_test
    raw_runs = []
    for i, split in enumerate(splits):
        feats, present = {}, {}
        for s in specs:
            z = _ar1(rng, cfg.n_tr, cfg.latent_dim, cfg.smoothness)
            x = z @ loadings[s.name] + cfg.feature_noise * rng.standard_normal((cfg.n_tr, s.dim))
            on = (not s.optional) or (cfg.optional_present_every > 0 and i % cfg.optional_present_every == 0)
            feats[s.name] = (x if on else np.zeros_like(x)).astype(np.float32)
            present[s.name] = on
        raw_runs.append((split, feats, present))

    clean = [reconstruct_targets(f, truth) for _, f, _ in raw_runs]
    truth.gain = 1.0 / np.maximum(np.concatenate(clean).std(axis=0), 1e-8)

    runs = []
    counters: dict[str, int] = {}
    for (split, feats, present), c in zip(raw_runs, clean):
        j = counters.get(split, 0)
        counters[split] = j + 1
        y = c * truth.gain
        if cfg.noise > 0:
            y = y + cfg.noise * rng.standard_normal(y.shape)
        bundle = FeatureBundle(feats, present, cfg.tr, f"{split}_{j:02d}")
        runs.append(RunSample(bundle, subject=len(runs) % cfg.n_subjects, targets=y.astype(np.float32), split=split))
    return Dataset(specs, atlas, runs, cfg.n_subjects, truth)


# -- dataset directories ------------------------------------------------------------------

def write_manifest(path, sample: RunSample, root: Path) -> None:
    items = {
        "run_id": sample.run_id,
        "split": sample.split,
        "subject": sample.subject,
        "tr": repr(float(sample.bundle.tr)),
        "n_tr": sample.bundle.n_tr,
    }
    rdir = Path(sample.run_id)
    for name, mat in sample.bundle.features.items():
        write_tensor(root / rdir / f"{name}.vten", np.asarray(mat, dtype=np.float32))
        items[f"feature.{name}"] = (rdir / f"{name}.vten").as_posix()
        items[f"present.{name}"] = int(bool(sample.bundle.present[name]))
    if sample.targets is not None:
        write_tensor(root / rdir / "targets.vten", np.asarray(sample.targets, dtype=np.float32))
        items["targets"] = (rdir / "targets.vten").as_posix()
    write_kv(path, items)


def read_manifest(path) -> RunSample:
    path = Path(path)
    kv = read_kv(path)
    root = path.parent.parent
    try:
        feats, present = {}, {}
        for key, val in kv.items():
            if key.startswith("feature."):
                name = key[len("feature."):]
                feats[name] = read_tensor(root / val)
                present[name] = kv.get(f"present.{name}", "1") == "1"
        targets = read_tensor(root / kv["targets"]) if "targets" in kv else None
        bundle = FeatureBundle(feats, present, float(kv["tr"]), kv["run_id"])
        if bundle.n_tr != int(kv["n_tr"]):
            raise FormatError(f"{path}: n_tr={kv['n_tr']} but feature matrices have {bundle.n_tr} rows")
        return RunSample(bundle, int(kv["subject"]), targets, kv.get("split", "train"))
    except KeyError as exc:
        raise FormatError(f"{path}: missing key {exc.args[0]!r}") from None


def save_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "manifests").mkdir(parents=True, exist_ok=True)
    for r in ds.runs:
        (out / r.run_id).mkdir(exist_ok=True)
        write_manifest(out / "manifests" / f"{r.run_id}.txt", r, out)
    write_atlas(out / "atlas.txt", ds.atlas)
    meta = {"subjects": ds.n_subjects, "parcels": ds.atlas.n_parcels,
            "sets": ",".join(s.name for s in ds.specs)}
    for s in ds.specs:
        meta[f"dim.{s.name}"] = s.dim
        meta[f"optional.{s.name}"] = int(s.optional)
    write_kv(out / "dataset.txt", meta)
    if ds.truth is not None:
        t = ds.truth
        tdir = out / "truth"
        tdir.mkdir(exist_ok=True)
        write_tensor(tdir / "mixing.vten", t.mixing.astype(np.float64))
        write_tensor(tdir / "gain.vten", t.gain.astype(np.float64))
        write_tensor(tdir / "kernel.vten", t.kernel.astype(np.float64))
        write_tensor(tdir / "governing.vten", t.governing.astype(np.float64))
        write_tensor(tdir / "pure.vten", t.pure.astype(np.float64))
        for name, w in t.weights.items():
            write_tensor(tdir / f"weights_{name}.vten", w.astype(np.float64))
        write_kv(tdir / "truth.txt", {"noise": repr(float(t.noise)), "sets": ",".join(t.set_names)})
    return out


def load_dataset(path) -> Dataset:
    root = Path(path)
    if not (root / "dataset.txt").exists():
        raise FormatError(f"{root}: not a dataset directory (missing dataset.txt)")
    meta = read_kv(root / "dataset.txt")
    specs = [FeatureSpec(n, int(meta[f"dim.{n}"]), meta.get(f"optional.{n}", "0") == "1")
             for n in meta["sets"].split(",")]
    atlas = load_atlas(root / "atlas.txt")
    runs = [read_manifest(p) for p in sorted((root / "manifests").glob("*.txt"))]
    order = {"train": 0, "val": 1, "test": 2}
    runs.sort(key=lambda r: (order.get(r.split, 3), r.run_id))
    truth = None
    tdir = root / "truth"
    if tdir.exists():
        tk = read_kv(tdir / "truth.txt")
        set_names = tuple(tk["sets"].split(","))
        truth = SyntheticTruth(
            governing=read_tensor(tdir / "governing.vten").astype(np.int64),
            pure=read_tensor(tdir / "pure.vten").astype(bool),
            mixing=read_tensor(tdir / "mixing.vten"),
            weights={n: read_tensor(tdir / f"weights_{n}.vten") for n in set_names},
            gain=read_tensor(tdir / "gain.vten"),
            kernel=read_tensor(tdir / "kernel.vten"),
            noise=float(tk["noise"]),
            set_names=set_names,
        )
    return Dataset(specs, atlas, runs, int(meta["subjects"]), truth)


def env_out_dir(default: str = "out") -> str:
    return os.environ.get("VIBE_OUT", default)
