"""Procedural test scenes: moving squares and gradients.

Rendered analytically with box-coverage anti-aliasing so that sub-pixel
motion produces smooth per-pixel intensity ramps.  The suite mixes flat
squares, gradient-filled squares, and squares over gradient backgrounds;
localized objects keep the scenes translation-asymmetric, which the
reference-free threshold search needs.
"""

from __future__ import annotations

import numpy as np

from evb.events import IntensityFrame
from evb.simulate import FrameSequence


def _coverage(lo: float, hi: float, n: int) -> np.ndarray:
    """Per-cell overlap of [lo, hi) with unit cells [i, i+1), i in [0, n)."""
    edges = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(edges + 1.0, hi) - np.maximum(edges, lo), 0.0, 1.0)


def square_frame(width, height, cx, cy, size, fg, bg) -> np.ndarray:
    """Axis-aligned square of side ``size`` centered at (cx, cy)."""
    cov_x = _coverage(cx - size / 2.0, cx + size / 2.0, width)
    cov_y = _coverage(cy - size / 2.0, cy + size / 2.0, height)
    return bg + (fg - bg) * np.outer(cov_y, cov_x)


def moving_square_sequence(
    width: int = 64,
    height: int = 64,
    n_frames: int = 7,
    dt_us: int = 2000,
    start: tuple[float, float] = (20.0, 24.0),
    velocity: tuple[float, float] = (2.5, 1.0),
    size: float = 18.0,
    fg: float = 0.85,
    bg: float = 0.25,
) -> FrameSequence:
    frames = []
    for i in range(n_frames):
        cx = start[0] + velocity[0] * i
        cy = start[1] + velocity[1] * i
        frames.append(
            IntensityFrame(square_frame(width, height, cx, cy, size, fg, bg), i * dt_us)
        )
    return FrameSequence(frames)


def gradient_square_sequence(
    width: int = 64,
    height: int = 64,
    n_frames: int = 7,
    dt_us: int = 2000,
    start: tuple[float, float] = (20.0, 24.0),
    velocity: tuple[float, float] = (2.5, 1.0),
    size: float = 18.0,
    lo: float = 0.08,
    hi: float = 0.9,
    bg: float = 0.25,
    axis: int = 0,
) -> FrameSequence:
    """Moving square filled with a steep linear gradient anchored to it."""
    frames = []
    for i in range(n_frames):
        cx = start[0] + velocity[0] * i
        cy = start[1] + velocity[1] * i
        cov = np.outer(
            _coverage(cy - size / 2.0, cy + size / 2.0, height),
            _coverage(cx - size / 2.0, cx + size / 2.0, width),
        )
        if axis == 0:
            u = (np.arange(width) - cx) / size + 0.5
            fill = np.tile(lo + (hi - lo) * np.clip(u, 0.0, 1.0), (height, 1))
        else:
            u = (np.arange(height) - cy) / size + 0.5
            fill = np.tile((lo + (hi - lo) * np.clip(u, 0.0, 1.0))[:, None], (1, width))
        frames.append(IntensityFrame(bg + cov * (fill - bg), i * dt_us))
    return FrameSequence(frames)


def square_on_gradient_sequence(
    width: int = 64,
    height: int = 64,
    n_frames: int = 7,
    dt_us: int = 2000,
    start: tuple[float, float] = (20.0, 24.0),
    velocity: tuple[float, float] = (2.5, 1.0),
    size: float = 16.0,
    fg: float = 0.9,
    bg_lo: float = 0.1,
    bg_hi: float = 0.5,
) -> FrameSequence:
    """Bright square moving over a static horizontal gradient background."""
    bg = np.tile(np.linspace(bg_lo, bg_hi, width), (height, 1))
    frames = []
    for i in range(n_frames):
        cx = start[0] + velocity[0] * i
        cy = start[1] + velocity[1] * i
        cov = np.outer(
            _coverage(cy - size / 2.0, cy + size / 2.0, height),
            _coverage(cx - size / 2.0, cx + size / 2.0, width),
        )
        frames.append(IntensityFrame(bg + cov * (fg - bg), i * dt_us))
    return FrameSequence(frames)


def drifting_gradient_sequence(
    width: int = 64,
    height: int = 64,
    n_frames: int = 7,
    dt_us: int = 2000,
    speed: float = 3.0,
    lo: float = 0.2,
    hi: float = 0.8,
    period: float | None = None,
) -> FrameSequence:
    """Sinusoidal horizontal gradient translating ``speed`` px per frame."""
    if period is None:
        period = width
    xs = np.arange(width, dtype=np.float64)
    frames = []
    for i in range(n_frames):
        phase = 2.0 * np.pi * (xs - speed * i) / period
        row = lo + (hi - lo) * 0.5 * (1.0 + np.sin(phase))
        frames.append(IntensityFrame(np.tile(row, (height, 1)), i * dt_us))
    return FrameSequence(frames)


def scene_suite(n_scenes: int = 10, seed: int = 3) -> list[FrameSequence]:
    """Mixed square/gradient scenes with varied motion and contrast."""
    rng = np.random.default_rng(seed)
    scenes: list[FrameSequence] = []
    for i in range(n_scenes):
        kind = i % 3
        start = (float(rng.uniform(16, 28)), float(rng.uniform(16, 28)))
        velocity = (float(rng.uniform(1.8, 3.5)), float(rng.uniform(-2.0, 2.0)))
        if kind == 0:
            scenes.append(
                moving_square_sequence(
                    start=start,
                    velocity=velocity,
                    size=float(rng.uniform(12, 22)),
                    fg=float(rng.uniform(0.7, 0.9)),
                    bg=float(rng.uniform(0.15, 0.3)),
                )
            )
        elif kind == 1:
            scenes.append(
                gradient_square_sequence(
                    start=start,
                    velocity=velocity,
                    size=float(rng.uniform(14, 22)),
                    axis=int(rng.integers(0, 2)),
                )
            )
        else:
            scenes.append(
                square_on_gradient_sequence(
                    start=start,
                    velocity=velocity,
                    size=float(rng.uniform(12, 18)),
                    fg=float(rng.uniform(0.8, 0.95)),
                )
            )
    return scenes
