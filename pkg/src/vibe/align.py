"""Bring timestamped feature streams onto the fMRI TR grid.

Three recipes are supported: mean-pooling text tokens per TR, sliding-window
mean/std statistics for frame-rate audio activations, and adaptive average
pooling of patch grids followed by a time average (video encoders).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_TR = 1.49


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class TRGrid:
    n_tr: int
    tr: float = DEFAULT_TR

    def __post_init__(self):
        if self.tr <= 0:
            raise AlignmentError(f"tr must be positive, got {self.tr}")
        if self.n_tr < 1:
            raise AlignmentError(f"n_tr must be >= 1, got {self.n_tr}")

    @property
    def duration(self) -> float:
        return self.n_tr * self.tr


@dataclass
class TokenStream:
    times: np.ndarray  # (N,) seconds, non-decreasing
    vectors: np.ndarray  # (N, D)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        self.vectors = np.asarray(self.vectors)
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.times):
            raise AlignmentError(
                f"token vectors must be N x D with N={len(self.times)}, got {self.vectors.shape}")
        if len(self.times) and np.any(np.diff(self.times) < 0):
            raise AlignmentError("token times must be non-decreasing")


@dataclass
class FrameStream:
    rate: float  # frames per second; frame i sits at time i / rate
    frames: np.ndarray  # (N, D) or (N, H, W, D)

    def __post_init__(self):
        if self.rate <= 0:
            raise AlignmentError(f"frame rate must be positive, got {self.rate}")
        self.frames = np.asarray(self.frames)

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.frames)) / self.rate


def tokens_to_tr(stream: TokenStream, grid: TRGrid, dim: int | None = None):
    """Average the token vectors falling inside each TR.

    Returns ``(features, empty)`` where ``features`` is ``n_tr x D`` and
    ``empty`` flags TRs without any token (their row is zero).  ``dim`` is
    only needed for an empty stream.
    """
    times = stream.times
    if len(times) == 0:
        if dim is None:
            raise AlignmentError("empty token stream needs an explicit feature dimension")
        return np.zeros((grid.n_tr, dim)), np.ones(grid.n_tr, dtype=bool)
    if times[0] < 0 or times[-1] > grid.duration:
        bad = times[0] if times[0] < 0 else times[-1]
        raise AlignmentError(f"token time {bad:.3f}s outside run [0, {grid.duration:.3f}]s")
    idx = np.minimum(np.floor(times / grid.tr).astype(int), grid.n_tr - 1)
    d = stream.vectors.shape[1]
    sums = np.zeros((grid.n_tr, d))
    np.add.at(sums, idx, stream.vectors)
    counts = np.bincount(idx, minlength=grid.n_tr)
    empty = counts == 0
    out = sums / np.maximum(counts, 1)[:, None]
    return out, empty


def window_frame_indices(n_frames: int, rate: float, t: int, tr: float,
                         window_s: float = 10.0, tail_s: float | None = None) -> np.ndarray:
    """Frame indices kept for TR ``t``.

    The window ends at ``(t+1)*tr``; only frames in its final ``tail_s``
    seconds are kept.  Frame ``i`` sits at ``i / rate``.  Negative indices
    denote the zero padding before the run start; indices past the stream
    end are dropped.
    """
    tail_s = tr if tail_s is None else tail_s
    end = (t + 1) * tr
    tail_start = end - min(tail_s, window_s)
    lo = int(np.ceil(tail_start * rate - 1e-9))
    hi = int(np.ceil(end * rate - 1e-9))
    return np.arange(lo, min(hi, n_frames))


def window_stats(stream: FrameStream, grid: TRGrid, window_s: float = 10.0,
                 tail_s: float | None = None) -> np.ndarray:
    """Per-TR mean and population std of frame activations, ``n_tr x 2D``."""
    tail_s = grid.tr if tail_s is None else tail_s
    if window_s < tail_s:
        raise AlignmentError(f"window_s ({window_s}) must be >= tail_s ({tail_s})")
    frames = stream.frames.reshape(len(stream.frames), -1)
    d = frames.shape[1]
    out = np.zeros((grid.n_tr, 2 * d))
    for t in range(grid.n_tr):
        idx = window_frame_indices(len(frames), stream.rate, t, grid.tr, window_s, tail_s)
        if len(idx) == 0:
            raise AlignmentError(
                f"no frames in the {tail_s:.3f}s tail of TR {t}; frame rate {stream.rate} too low "
                f"or stream shorter than the run")
        sel = np.zeros((len(idx), d))
        real = idx >= 0
        sel[real] = frames[idx[real]]
        out[t, :d] = sel.mean(axis=0)
        out[t, d:] = sel.std(axis=0)
    return out


def _bounds(n: int, out: int) -> list[tuple[int, int]]:
    return [((i * n) // out, -((-(i + 1) * n) // out)) for i in range(out)]


def adaptive_pool_grid(grid: np.ndarray, out_h: int = 3, out_w: int = 3) -> np.ndarray:
    """Adaptive average pooling of an ``H x W x D`` grid to ``out_h x out_w x D``.

    Cell ``(i, j)`` averages rows ``[floor(i*H/out_h), ceil((i+1)*H/out_h))`` and
    the analogous column range, so neighbouring cells may overlap.
    """
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise AlignmentError(f"grid must be H x W x D, got shape {grid.shape}")
    h, w, d = grid.shape
    if out_h > h or out_w > w:
        raise AlignmentError(f"output {out_h}x{out_w} exceeds input grid {h}x{w}")
    out = np.empty((out_h, out_w, d), dtype=np.result_type(grid.dtype, np.float32))
    for i, (r0, r1) in enumerate(_bounds(h, out_h)):
        for j, (c0, c1) in enumerate(_bounds(w, out_w)):
            out[i, j] = grid[r0:r1, c0:c1].mean(axis=(0, 1))
    return out


def time_avg_flatten(x: np.ndarray) -> np.ndarray:
    """Average a ``T x 3 x 3 x D`` stack over time and flatten row-major."""
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[0] < 1:
        raise AlignmentError(f"expected T x H x W x D with T >= 1, got {x.shape}")
    return x.mean(axis=0).reshape(-1)


def grid_stream_to_tr(stream: FrameStream, grid: TRGrid, out_h: int = 3, out_w: int = 3) -> np.ndarray:
    """Pool every grid frame, then average the frames inside each TR and flatten."""
    frames = stream.frames
    if frames.ndim != 4:
        raise AlignmentError(f"grid stream frames must be N x H x W x D, got {frames.shape}")
    pooled = np.stack([adaptive_pool_grid(f, out_h, out_w) for f in frames])
    times = stream.times
    idx = np.minimum(np.floor(times / grid.tr).astype(int), grid.n_tr)
    rows = []
    for t in range(grid.n_tr):
        sel = pooled[idx == t]
        if len(sel) == 0:
            raise AlignmentError(f"no grid frames fall inside TR {t}")
        rows.append(time_avg_flatten(sel))
    return np.stack(rows)
