"""Closed-form constant-threshold deblurring and video generation.

With one scalar threshold per polarity, the log-domain change caused by
the events up to a query time is just a signed count times the
threshold.  Averaging the exponentiated change maps over the exposure
reproduces the blur, which makes the sharp frame recoverable in closed
form; the same change maps roll a sharp frame forward into video.
This is the physical baseline the learned networks are measured against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .events import EventStream, IntensityFrame, LogFrame, slice_events
from .simulate import FrameSequence, ThresholdConfig

#: Default number of inner sample times of the discretized exposure sum,
#: matching the latent-frame count of the synthetic dataset windows.
DEFAULT_SAMPLES = 7


def _resolve_window(stream: EventStream, window: tuple[int, int] | None) -> tuple[int, int]:
    if window is not None:
        t0, t1 = int(window[0]), int(window[1])
        if t0 >= t1:
            raise ValueError(f"invalid window [{t0}, {t1}]")
        return t0, t1
    if len(stream) == 0:
        raise ValueError("cannot infer an exposure window from an empty stream")
    return int(stream.t[0]), int(stream.t[-1])


def _signed_threshold_sum(
    stream: EventStream, cfg: ThresholdConfig, t_from: int, t_to: int
) -> np.ndarray:
    """Per-pixel sum of p_i * c over events with t_from <= t < t_to."""
    out = np.zeros((stream.height, stream.width), dtype=np.float64)
    lo = int(np.searchsorted(stream.t, t_from, side="left"))
    hi = int(np.searchsorted(stream.t, t_to, side="left"))
    if hi > lo:
        contrib = np.where(stream.p[lo:hi] > 0, cfg.c_pos, -cfg.c_neg)
        np.add.at(out, (stream.y[lo:hi], stream.x[lo:hi]), contrib)
    return out


def event_integral(
    stream: EventStream,
    cfg: ThresholdConfig,
    window: tuple[int, int],
    t_query: int,
) -> LogFrame:
    """Log-domain change map accumulated over [t_start, t_query).

    L(t_query) = L(t_start) + returned map.  ``t_query`` may exceed the
    window end by one microsecond so callers can include events that land
    exactly on the window boundary.
    """
    t0, t1 = int(window[0]), int(window[1])
    if t0 >= t1:
        raise ValueError(f"invalid window [{t0}, {t1}]")
    if not t0 <= t_query <= t1 + 1:
        raise ValueError(f"t_query {t_query} outside window [{t0}, {t1}]")
    return LogFrame(_signed_threshold_sum(stream, cfg, t0, t_query), cfg.log_eps)


def _sample_times(t0: int, t1: int, n: int) -> list[int]:
    if n == 1:
        return [t0]
    return [t0 + int(round(k * (t1 - t0) / (n - 1))) for k in range(n)]


def edi_deblur(
    blurry: IntensityFrame,
    stream: EventStream,
    cfg: ThresholdConfig,
    window: tuple[int, int] | None = None,
    n_samples: int = DEFAULT_SAMPLES,
) -> IntensityFrame:
    """Restore the sharp frame at exposure start from blur plus events.

    The exposure is discretized into ``n_samples`` latent times t_m and
    L(t0) = log B - log((1/M) sum_m exp(E(t_m))) with E the signed
    threshold sums; the result is exp-mapped and clamped to [0, 1].
    """
    if len(stream) == 0:
        return IntensityFrame(blurry.pixels.copy(), blurry.t)
    if (stream.height, stream.width) != blurry.shape:
        raise ValueError(
            f"stream geometry {stream.width}x{stream.height} does not match image {blurry.shape}"
        )
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    t0, t1 = _resolve_window(stream, window)
    times = _sample_times(t0, t1, n_samples)
    change = np.zeros((stream.height, stream.width), dtype=np.float64)
    acc = np.zeros_like(change)
    # E(t_m) accumulates events in (t0, t_m]; E(t_0) is identically zero.
    prev = t0 + 1
    for tm in times:
        change += _signed_threshold_sum(stream, cfg, prev, tm + 1)
        acc += np.exp(change)
        prev = tm + 1
    log_sharp = np.log(np.maximum(blurry.pixels, cfg.log_eps)) - np.log(acc / len(times))
    return IntensityFrame(np.clip(np.exp(log_sharp), 0.0, 1.0), t0)


def edi_generate(
    sharp: IntensityFrame,
    stream: EventStream,
    cfg: ThresholdConfig,
    q: int,
    window: tuple[int, int] | None = None,
) -> FrameSequence:
    """Integrate events forward from a sharp frame into q additional frames.

    The window splits into q equal sub-intervals; each step adds the
    sub-interval's signed threshold sum in the log domain.  Frame 0 is
    the input.
    """
    if q < 1:
        raise ValueError("q must be >= 1")
    if len(stream) and (stream.height, stream.width) != sharp.shape:
        raise ValueError("stream geometry does not match image")
    if window is None and len(stream) == 0:
        # Zero residual everywhere; fabricate unit-spaced timestamps.
        window = (sharp.t, sharp.t + q)
    t0, t1 = _resolve_window(stream, window)
    bounds = [t0 + int(round(k * (t1 - t0) / q)) for k in range(q + 1)]
    log_px = np.log(np.maximum(sharp.pixels, cfg.log_eps))
    frames = [IntensityFrame(sharp.pixels.copy(), bounds[0])]
    for k in range(q):
        # Events on a boundary belong to the earlier sub-interval: (b_k, b_{k+1}].
        log_px = log_px + _signed_threshold_sum(stream, cfg, bounds[k] + 1, bounds[k + 1] + 1)
        frames.append(IntensityFrame(np.clip(np.exp(log_px), 0.0, 1.0), bounds[k + 1]))
    return FrameSequence(frames)


@dataclass(frozen=True)
class ThresholdEstimate:
    """Result of the 1-D threshold search."""

    c: float
    criterion: str
    degenerate: bool = False
    scores: tuple[tuple[float, float], ...] = ()


def sharpness_score(image: IntensityFrame) -> float:
    """Variance of the Laplacian (diagnostic only).

    Monotone in the assumed threshold for this model family, since
    over-correction keeps amplifying edge contrast, so it cannot locate
    the threshold on its own; see self_consistency_score.
    """
    return float(ndimage.laplace(image.pixels).var())


def _latent_spreads(
    blurry: IntensityFrame,
    stream: EventStream,
    c: float,
    window: tuple[int, int],
    n_samples: int,
    log_eps: float,
) -> np.ndarray:
    """Global std of the restoration to each of the n_samples latent times."""
    t0, t1 = window
    times = _sample_times(t0, t1, n_samples)
    log_blur = np.log(np.maximum(blurry.pixels, log_eps))
    cfg = ThresholdConfig(c_pos=c, c_neg=c, log_eps=log_eps)
    maps = []
    change = np.zeros((stream.height, stream.width), dtype=np.float64)
    prev = t0 + 1
    for tm in times:
        change += _signed_threshold_sum(stream, cfg, prev, tm + 1)
        maps.append(change.copy())
        prev = tm + 1
    spreads = []
    for e_j in maps:
        denom = np.mean([np.exp(e_m - e_j) for e_m in maps], axis=0)
        restored = np.clip(np.exp(log_blur - np.log(denom)), 0.0, 1.0)
        spreads.append(restored.std())
    return np.asarray(spreads)


def self_consistency_score(
    blurry: IntensityFrame,
    stream: EventStream,
    c: float,
    window: tuple[int, int],
    n_samples: int = DEFAULT_SAMPLES,
    log_eps: float = 1.0 / 255.0,
) -> float:
    """Inconsistency of restorations across latent times; minimal near the true threshold.

    Restoring the blurry image to every latent sample time must yield
    translated copies of one scene, so their global contrast statistics
    agree only when the assumed threshold matches the sensor's.  The
    spread of those statistics is normalized by how far the restorations
    moved from the blurry input, which removes the trivial consensus of
    a vanishing threshold.
    """
    spreads = _latent_spreads(blurry, stream, c, window, n_samples, log_eps)
    moved = np.mean((spreads - blurry.pixels.std()) ** 2)
    return float(np.var(spreads) / (moved + 1e-12))


def estimate_threshold(
    blurry: IntensityFrame,
    stream: EventStream,
    search: tuple[float, float, int] = (0.05, 0.5, 30),
    criterion: str = "sharpness",
    gt: IntensityFrame | None = None,
    window: tuple[int, int] | None = None,
    n_samples: int = DEFAULT_SAMPLES,
) -> ThresholdEstimate:
    """Grid-search a single scalar threshold (c_pos = c_neg = c).

    ``oracle`` minimizes MSE against a provided ground truth.
    ``sharpness`` is reference-free: it walks the log-spaced grid upward
    and stops at the first local minimum of the cross-time
    self-consistency score, which is where the restorations stop
    converging toward one sharp scene.  Ties break toward smaller c.
    """
    c_min, c_max, steps = search
    if c_min <= 0:
        raise ValueError("c_min must be > 0")
    if steps < 2:
        raise ValueError("steps must be >= 2")
    if criterion not in ("sharpness", "oracle"):
        raise ValueError(f"unknown criterion {criterion!r}")
    if criterion == "oracle" and gt is None:
        raise ValueError("oracle criterion needs a ground-truth image")
    if len(stream) == 0:
        return ThresholdEstimate(c=float(c_min), criterion=criterion, degenerate=True)
    grid = np.geomspace(c_min, c_max, steps)
    win = _resolve_window(stream, window)
    if criterion == "oracle":
        assert gt is not None
        best_c = None
        best_score = None
        scores: list[tuple[float, float]] = []
        for c in grid:
            cfg = ThresholdConfig(c_pos=float(c), c_neg=float(c))
            restored = edi_deblur(blurry, stream, cfg, window=win, n_samples=n_samples)
            score = -float(np.mean((restored.pixels - gt.pixels) ** 2))
            scores.append((float(c), score))
            if best_score is None or score > best_score:
                best_c, best_score = float(c), score
        assert best_c is not None
        return ThresholdEstimate(c=best_c, criterion=criterion, scores=tuple(scores))
    curve = [
        self_consistency_score(blurry, stream, float(c), win, n_samples) for c in grid
    ]
    pick = len(grid) - 1
    for i in range(len(grid)):
        left_ok = i == 0 or curve[i] <= curve[i - 1]
        right_ok = i == len(grid) - 1 or curve[i] < curve[i + 1]
        if left_ok and right_ok:
            pick = i
            break
    return ThresholdEstimate(
        c=float(grid[pick]),
        criterion=criterion,
        scores=tuple((float(c), float(s)) for c, s in zip(grid, curve)),
    )
