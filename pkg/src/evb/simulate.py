"""Threshold-crossing event simulation, blur synthesis, and dataset building.

The simulator linearly interpolates per-pixel log intensity between
consecutive frames and emits an event each time the interpolated signal
moves a full contrast threshold away from the pixel's reference level.
The reference level advances to the exact crossing level, so several
events can fire inside one inter-frame segment at distinct times.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .events import DEFAULT_LOG_EPS, EventStream, IntensityFrame, save_events

logger = logging.getLogger(__name__)

# Sampled per-event thresholds are never allowed below this (log units).
MIN_THRESHOLD = 0.01


@dataclass(frozen=True)
class ThresholdConfig:
    """Contrast thresholds of the simulated sensor.

    c_pos / c_neg are the nominal log-intensity changes that trigger a
    positive / negative event.  With sigma_c > 0 every crossing check
    draws its threshold from Normal(c, sigma_c) clamped at 0.01.
    """

    c_pos: float = 0.2
    c_neg: float = 0.2
    sigma_c: float = 0.0
    seed: int = 0
    log_eps: float = DEFAULT_LOG_EPS
    refractory_us: int = 0

    def __post_init__(self) -> None:
        if self.c_pos <= 0 or self.c_neg <= 0:
            raise ValueError("contrast thresholds must be > 0")
        if self.sigma_c < 0:
            raise ValueError("sigma_c must be >= 0")
        if self.refractory_us < 0:
            raise ValueError("refractory_us must be >= 0")


@dataclass
class FrameSequence:
    """Ordered sharp frames with strictly increasing timestamps."""

    frames: list[IntensityFrame]

    def __post_init__(self) -> None:
        if not self.frames:
            raise ValueError("a frame sequence needs at least one frame")
        shape = self.frames[0].shape
        for a, b in zip(self.frames, self.frames[1:]):
            if b.t <= a.t:
                raise ValueError("frame timestamps must be strictly increasing")
        for f in self.frames:
            if f.shape != shape:
                raise ValueError("frames must share one geometry")

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i: int) -> IntensityFrame:
        return self.frames[i]

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([f.t for f in self.frames], dtype=np.int64)

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames[0].shape

    @classmethod
    def from_dir(cls, path: str | Path) -> "FrameSequence":
        """Load numbered grayscale PNG frames plus a timestamps.txt file."""
        path = Path(path)
        ts_file = path / "timestamps.txt"
        if not ts_file.exists():
            raise FileNotFoundError(f"{path}: missing timestamps.txt")
        timestamps = [int(line) for line in ts_file.read_text().split()]
        pngs = sorted(path.glob("*.png"))
        if len(pngs) != len(timestamps):
            raise ValueError(f"{path}: {len(pngs)} frames but {len(timestamps)} timestamps")
        frames = [IntensityFrame(load_image(p), t) for p, t in zip(pngs, timestamps)]
        return cls(frames)

    def save_to_dir(self, path: str | Path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        for i, f in enumerate(self.frames):
            save_image(f.pixels, path / f"{i:06d}.png")
        (path / "timestamps.txt").write_text("".join(f"{f.t}\n" for f in self.frames))


def load_image(path: str | Path) -> np.ndarray:
    """Load an image as grayscale float64 in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def save_image(pixels: np.ndarray, path: str | Path) -> None:
    """Save a [0, 1] float image as an 8-bit grayscale PNG."""
    arr = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def simulate(frames: FrameSequence, cfg: ThresholdConfig) -> EventStream:
    """Generate the event stream a threshold sensor would emit for ``frames``.

    Emitted timestamps are integer µs in (t_first, t_last]; the output is
    sorted by (t, y, x).  With sigma_c == 0 the result is exact threshold
    quantization of the piecewise-linear log-intensity trajectories.
    """
    if len(frames) < 2:
        raise ValueError("simulate needs at least two frames")
    height, width = frames.shape
    log_stack = np.stack(
        [np.log(np.maximum(f.pixels, cfg.log_eps)) for f in frames.frames]
    )
    ts = frames.timestamps
    if cfg.sigma_c == 0.0 and cfg.refractory_us == 0:
        t, x, y, p = _simulate_exact(log_stack, ts, cfg)
    else:
        t, x, y, p = _simulate_noisy(log_stack, ts, cfg)
    order = np.lexsort((x, y, t))
    return EventStream(width, height, t[order], x[order], y[order], p[order])


def _simulate_exact(log_stack: np.ndarray, ts: np.ndarray, cfg: ThresholdConfig):
    """Vectorized noise-free path: per segment, crossing counts are a floor."""
    ref = log_stack[0].copy()
    out_t: list[np.ndarray] = []
    out_x: list[np.ndarray] = []
    out_y: list[np.ndarray] = []
    out_p: list[np.ndarray] = []
    for i in range(log_stack.shape[0] - 1):
        l0, l1 = log_stack[i], log_stack[i + 1]
        t0, t1 = int(ts[i]), int(ts[i + 1])
        delta = l1 - ref
        n_pos = np.where(delta > 0, np.floor(delta / cfg.c_pos), 0.0).astype(np.int64)
        n_neg = np.where(delta < 0, np.floor(-delta / cfg.c_neg), 0.0).astype(np.int64)
        counts = n_pos + n_neg
        total = int(counts.sum())
        if total == 0:
            continue
        ys, xs = np.nonzero(counts)
        cnt = counts[ys, xs]
        pix = np.repeat(np.arange(xs.size), cnt)
        offs = np.concatenate(([0], np.cumsum(cnt)[:-1]))
        k = np.arange(total) - np.repeat(offs, cnt) + 1
        sign = np.where(delta[ys, xs] > 0, 1, -1)
        step = np.where(sign > 0, cfg.c_pos, cfg.c_neg)
        levels = ref[ys, xs][pix] + (sign * step)[pix] * k
        slope_den = (l1 - l0)[ys, xs][pix]
        # A flat segment can still owe one event when rounding left the
        # previous residual a hair past the threshold; stamp it at t1.
        flat = slope_den == 0.0
        tau = t0 + (levels - l0[ys, xs][pix]) / np.where(flat, 1.0, slope_den) * (t1 - t0)
        tau = np.where(flat, float(t1), tau)
        tt = np.clip(np.rint(tau).astype(np.int64), t0 + 1, t1)
        out_t.append(tt)
        out_x.append(xs[pix].astype(np.int64))
        out_y.append(ys[pix].astype(np.int64))
        out_p.append(sign[pix].astype(np.int64))
        ref[ys, xs] += sign * step * cnt
    if not out_t:
        z = np.array([], dtype=np.int64)
        return z, z.copy(), z.copy(), z.copy()
    return (np.concatenate(out_t), np.concatenate(out_x), np.concatenate(out_y), np.concatenate(out_p))


def _simulate_noisy(log_stack: np.ndarray, ts: np.ndarray, cfg: ThresholdConfig):
    """Per-pixel walker used when thresholds are noisy or a refractory period is set."""
    rng = np.random.default_rng(cfg.seed)
    n_frames, height, width = log_stack.shape
    ev_t: list[int] = []
    ev_x: list[int] = []
    ev_y: list[int] = []
    ev_p: list[int] = []
    for y in range(height):
        for x in range(width):
            ref = log_stack[0, y, x]
            last_t = -np.inf
            for i in range(n_frames - 1):
                l0 = log_stack[i, y, x]
                l1 = log_stack[i + 1, y, x]
                t0, t1 = int(ts[i]), int(ts[i + 1])
                while True:
                    if l1 > ref:
                        c = _draw(rng, cfg.c_pos, cfg.sigma_c)
                        if l1 - ref < c:
                            break
                        level, pol = ref + c, 1
                    elif l1 < ref:
                        c = _draw(rng, cfg.c_neg, cfg.sigma_c)
                        if ref - l1 < c:
                            break
                        level, pol = ref - c, -1
                    else:
                        break
                    if l1 == l0:
                        tau = float(t1)
                    else:
                        tau = t0 + (level - l0) / (l1 - l0) * (t1 - t0)
                    tt = int(np.clip(np.rint(tau), t0 + 1, t1))
                    ref = level
                    # Crossings inside the refractory window advance the
                    # reference level but emit nothing.
                    if tt - last_t < cfg.refractory_us:
                        continue
                    last_t = tt
                    ev_t.append(tt)
                    ev_x.append(x)
                    ev_y.append(y)
                    ev_p.append(pol)
    return (
        np.asarray(ev_t, dtype=np.int64),
        np.asarray(ev_x, dtype=np.int64),
        np.asarray(ev_y, dtype=np.int64),
        np.asarray(ev_p, dtype=np.int64),
    )


def _draw(rng: np.random.Generator, nominal: float, sigma: float) -> float:
    if sigma == 0.0:
        return nominal
    return max(float(rng.normal(nominal, sigma)), MIN_THRESHOLD)


def synthesize_blur(frames: FrameSequence, start: int = 0, count: int | None = None) -> IntensityFrame:
    """Average ``count`` intensity frames from ``start``; timestamp = first frame's t."""
    if count is None:
        count = len(frames) - start
    if count < 1:
        raise ValueError("blur window must contain at least one frame")
    if start < 0 or start + count > len(frames):
        raise ValueError(f"window [{start}, {start + count}) outside sequence of {len(frames)}")
    window = [frames[i].pixels for i in range(start, start + count)]
    return IntensityFrame(np.mean(window, axis=0), frames[start].t)


@dataclass(frozen=True)
class DatasetExample:
    """One blurry/sharp/HFR-targets/events tuple of the synthetic dataset."""

    name: str
    split: str
    blurry: str
    sharp: str
    hfr: tuple[str, ...]
    hfr_t: tuple[int, ...]
    events: str
    window: tuple[int, int]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "split": self.split,
            "blurry": self.blurry,
            "sharp": self.sharp,
            "hfr": list(self.hfr),
            "hfr_t": list(self.hfr_t),
            "events": self.events,
            "window": list(self.window),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetExample":
        return cls(
            d["name"], d["split"], d["blurry"], d["sharp"],
            tuple(d["hfr"]), tuple(int(t) for t in d["hfr_t"]),
            d["events"], (int(d["window"][0]), int(d["window"][1])),
        )


@dataclass
class DatasetIndex:
    """Manifest of a built dataset; paths are relative to ``root``."""

    root: Path
    examples: list[DatasetExample]
    meta: dict = field(default_factory=dict)

    def split(self, tag: str) -> list[DatasetExample]:
        return [e for e in self.examples if e.split == tag]

    def path(self, rel: str) -> Path:
        return self.root / rel

    def save(self, path: str | Path | None = None) -> Path:
        path = Path(path) if path else self.root / "manifest.json"
        doc = {"meta": self.meta, "examples": [e.to_dict() for e in self.examples]}
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DatasetIndex":
        path = Path(path)
        doc = json.loads(path.read_text())
        examples = [DatasetExample.from_dict(d) for d in doc["examples"]]
        return cls(path.parent, examples, doc.get("meta", {}))


def build_dataset(
    video_dirs: list[str | Path],
    out_dir: str | Path,
    cfg: ThresholdConfig,
    window_len: int = 7,
    q: int = 6,
    split_ratio: tuple[int, int] = (2, 1),
    seed: int = 0,
) -> DatasetIndex:
    """Cut videos into non-overlapping exposure windows and synthesize examples.

    Per window: blurry = mean of the ``window_len`` frames, sharp target =
    first frame, HFR targets = the next ``q`` frames, events = simulated
    stream over the window.  Examples are shuffled with ``seed`` and split
    train:val by ``split_ratio``.
    """
    if window_len < 2:
        raise ValueError("window_len must be >= 2")
    if not 1 <= q <= window_len - 1:
        raise ValueError(f"q must be in [1, {window_len - 1}]")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    examples: list[DatasetExample] = []
    idx = 0
    for vdir in video_dirs:
        vdir = Path(vdir)
        seq = FrameSequence.from_dir(vdir)
        if len(seq) < window_len:
            logger.warning("%s: only %d frames, need %d; skipping", vdir, len(seq), window_len)
            continue
        for w in range(len(seq) // window_len):
            start = w * window_len
            window_frames = FrameSequence(seq.frames[start : start + window_len])
            name = f"{vdir.name}_w{w:03d}"
            ex_dir = out_dir / name
            ex_dir.mkdir(exist_ok=True)
            blurry = synthesize_blur(window_frames)
            sharp = window_frames[0]
            stream = simulate(window_frames, dataclasses.replace(cfg, seed=cfg.seed + idx))
            save_image(blurry.pixels, ex_dir / "blurry.png")
            save_image(sharp.pixels, ex_dir / "sharp.png")
            hfr_names = []
            for k in range(1, q + 1):
                fname = f"hfr_{k:02d}.png"
                save_image(window_frames[k].pixels, ex_dir / fname)
                hfr_names.append(f"{name}/{fname}")
            save_events(stream, ex_dir / "events.evt1", "evt1")
            t0 = int(window_frames[0].t)
            t_end = int(window_frames[window_len - 1].t)
            hfr_ts = [int(window_frames[k].t) for k in range(1, q + 1)]
            examples.append(
                DatasetExample(
                    name=name,
                    split="train",
                    blurry=f"{name}/blurry.png",
                    sharp=f"{name}/sharp.png",
                    hfr=tuple(hfr_names),
                    hfr_t=tuple(hfr_ts),
                    events=f"{name}/events.evt1",
                    window=(t0, t_end),
                )
            )
            idx += 1
    if not examples:
        raise ValueError("no usable videos: every directory was too short or missing")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(examples))
    n_train = len(examples) * split_ratio[0] // (split_ratio[0] + split_ratio[1])
    val_ids = set(order[n_train:].tolist())
    examples = [
        dataclasses.replace(e, split="val" if i in val_ids else "train")
        for i, e in enumerate(examples)
    ]
    meta = {
        "window_len": window_len,
        "q": q,
        "seed": seed,
        "split_ratio": list(split_ratio),
        "threshold": {
            "c_pos": cfg.c_pos,
            "c_neg": cfg.c_neg,
            "sigma_c": cfg.sigma_c,
            "seed": cfg.seed,
            "log_eps": cfg.log_eps,
            "refractory_us": cfg.refractory_us,
        },
    }
    index = DatasetIndex(out_dir, examples, meta)
    index.save()
    return index
