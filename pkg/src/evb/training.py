"""Losses, event-aware crop sampling, and the two training loops."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .events import EventStream, slice_events, voxelize
from .metrics import psnr
from .networks import (
    Checkpoint,
    NetworkConfig,
    build_deblur_net,
    build_hfr_net,
    voxel_to_channels,
)
from .simulate import DatasetIndex, load_image

logger = logging.getLogger(__name__)


class TrainingDiverged(Exception):
    """Loss became non-finite during optimization."""


#: Maps a (N, 1, H, W) image batch to a list of feature map batches.
FeatureExtractor = Callable[[torch.Tensor], list[torch.Tensor]]


@dataclass
class LossConfig:
    """Total loss = L1 + lam * perceptual; lam = 0 disables the extractor."""

    lam: float = 0.01
    extractor: FeatureExtractor | None = None

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError("lam must be >= 0")


@dataclass
class TrainConfig:
    learning_rate: float = 0.002
    batch_size: int = 8
    epochs: int = 50
    crop: int = 256
    min_event_density: float = 0.05
    max_resample: int = 20
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.learning_rate, self.batch_size, self.epochs, self.crop) < 0:
            raise ValueError("train config fields must be positive")
        if self.min_event_density < 0 or self.max_resample < 1:
            raise ValueError("invalid crop sampling parameters")


def l1_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    pred = torch.as_tensor(pred)
    gt = torch.as_tensor(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return (pred - gt).abs().mean()


def perceptual_loss(
    pred: torch.Tensor, gt: torch.Tensor, extractor: FeatureExtractor
) -> torch.Tensor:
    """Mean over feature maps of the per-pixel squared feature difference."""
    if extractor is None:
        raise ValueError("perceptual loss needs a feature extractor")
    feats_pred = extractor(pred)
    feats_gt = extractor(gt)
    terms = [((fp - fg) ** 2).mean() for fp, fg in zip(feats_pred, feats_gt)]
    return torch.stack(terms).mean()


def total_loss(pred: torch.Tensor, gt: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    loss = l1_loss(pred, gt)
    if cfg.lam > 0 and cfg.extractor is not None:
        loss = loss + cfg.lam * perceptual_loss(pred, gt, cfg.extractor)
    return loss


class RandomConvExtractor(nn.Module):
    """Fixed-seed 3-layer random convolution stack.

    Desk-scale stand-in for a pretrained perceptual backbone; weights are
    frozen at construction, so the loss it induces is deterministic.
    """

    def __init__(self, seed: int = 0, channels: Sequence[int] = (16, 32, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        in_ch = 1
        for out_ch in channels:
            conv = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=gen) / (3.0 * in_ch**0.5)
                )
                conv.bias.zero_()
            layers.append(conv)
            in_ch = out_ch
        self.convs = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for conv in self.convs:
            x = torch.relu(conv(x))
            feats.append(x)
        return feats


def vgg19_extractor(weights_path: str | Path, layers: Sequence[int] = (3, 8, 17)):
    """Perceptual backbone from a locally stored VGG19 state dict.

    ``layers`` are indices into torchvision's vgg19().features after
    whose activation the maps are taken.  Inputs are single-channel in
    [0, 1]; they are replicated to RGB and ImageNet-normalized.
    """
    from torchvision.models import vgg19

    net = vgg19()
    state = torch.load(weights_path, map_location="cpu", weights_only=True)
    net.load_state_dict(state)
    features = net.features.eval()
    for p in features.parameters():
        p.requires_grad_(False)
    mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
    std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
    cut = max(layers)

    def extract(x: torch.Tensor) -> list[torch.Tensor]:
        h = (x.repeat(1, 3, 1, 1) - mean) / std
        out = []
        for i, layer in enumerate(features):
            h = layer(h)
            if i in layers:
                out.append(h)
            if i == cut:
                break
        return out

    return extract


@dataclass
class TrainExample:
    """One loaded dataset example; images are float arrays in [0, 1]."""

    name: str
    blurry: np.ndarray
    sharp: np.ndarray
    hfr: list[np.ndarray]
    hfr_t: list[int]
    events: EventStream
    window: tuple[int, int]


def load_examples(index: DatasetIndex, split: str) -> list[TrainExample]:
    from .events import load_events

    out = []
    for ex in index.split(split):
        out.append(
            TrainExample(
                name=ex.name,
                blurry=load_image(index.path(ex.blurry)),
                sharp=load_image(index.path(ex.sharp)),
                hfr=[load_image(index.path(p)) for p in ex.hfr],
                hfr_t=list(ex.hfr_t),
                events=load_events(index.path(ex.events)),
                window=ex.window,
            )
        )
    return out


def _crop_events(events: EventStream, top: int, left: int, crop: int) -> EventStream:
    keep = (
        (events.x >= left)
        & (events.x < left + crop)
        & (events.y >= top)
        & (events.y < top + crop)
    )
    return EventStream(
        crop,
        crop,
        events.t[keep],
        events.x[keep] - left,
        events.y[keep] - top,
        events.p[keep],
    )


def sample_crop(
    example: TrainExample,
    crop: int,
    min_density: float,
    max_resample: int,
    rng: np.random.Generator,
) -> tuple[TrainExample, bool]:
    """Random spatial crop with enough events; best-of-K fallback.

    Returns (cropped example, accepted); accepted is False when no
    candidate reached ``min_density`` events per pixel and the densest
    one was kept instead.
    """
    height, width = example.blurry.shape
    if height < crop or width < crop:
        raise ValueError(f"image {example.blurry.shape} smaller than crop {crop}")
    need = min_density * crop * crop
    best: tuple[int, int, int] | None = None
    for _ in range(max_resample):
        top = int(rng.integers(0, height - crop + 1))
        left = int(rng.integers(0, width - crop + 1))
        count = int(
            np.count_nonzero(
                (example.events.x >= left)
                & (example.events.x < left + crop)
                & (example.events.y >= top)
                & (example.events.y < top + crop)
            )
        )
        if best is None or count > best[0]:
            best = (count, top, left)
        if count >= need:
            return _apply_crop(example, top, left, crop), True
    assert best is not None
    _, top, left = best
    return _apply_crop(example, top, left, crop), False


def _apply_crop(example: TrainExample, top: int, left: int, crop: int) -> TrainExample:
    sl = (slice(top, top + crop), slice(left, left + crop))
    return TrainExample(
        name=example.name,
        blurry=example.blurry[sl],
        sharp=example.sharp[sl],
        hfr=[f[sl] for f in example.hfr],
        hfr_t=list(example.hfr_t),
        events=_crop_events(example.events, top, left, crop),
        window=example.window,
    )


def _log_tensor(images: np.ndarray, eps: float) -> torch.Tensor:
    return torch.from_numpy(np.log(np.maximum(images, eps)).astype(np.float32))


def _full_window_voxel(ex: TrainExample, bins: int) -> np.ndarray:
    t0, t1 = ex.window
    # +1 so events landing exactly on the exposure end are kept.
    return voxelize(ex.events, (t0, t1 + 1), bins).values


def _deblur_batch(
    examples: list[TrainExample], net_cfg: NetworkConfig
) -> tuple[torch.Tensor, torch.Tensor]:
    xs, ys = [], []
    for ex in examples:
        vox = np.clip(
            _full_window_voxel(ex, net_cfg.bins).astype(np.float32) / net_cfg.voxel_scale,
            -1.0,
            1.0,
        )
        log_img = np.log(np.maximum(ex.blurry, net_cfg.log_eps)).astype(np.float32)
        xs.append(np.concatenate([log_img[None], vox], axis=0))
        ys.append(ex.sharp.astype(np.float32)[None])
    return torch.from_numpy(np.stack(xs)), torch.from_numpy(np.stack(ys))


def _prepare_crops(
    examples: list[TrainExample], train_cfg: TrainConfig, rng: np.random.Generator
) -> list[TrainExample]:
    out = []
    for ex in examples:
        h, w = ex.blurry.shape
        if h == train_cfg.crop and w == train_cfg.crop:
            out.append(ex)
        else:
            cropped, _ = sample_crop(
                ex, train_cfg.crop, train_cfg.min_event_density, train_cfg.max_resample, rng
            )
            out.append(cropped)
    return out


def _write_log(out_dir: Path, history: list[dict]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "training_log.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss", "val_psnr"])
        writer.writeheader()
        writer.writerows(history)
    try:
        from .plots import save_training_curves

        save_training_curves(history, out_dir / "training_curves.png")
    except Exception:  # plotting must never kill a finished run
        logger.exception("could not render training curves")


def train_deblur(
    index: DatasetIndex,
    net_cfg: NetworkConfig,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig | None = None,
    out_dir: str | Path | None = None,
) -> Checkpoint:
    """Train the dense-encoder deblurring net; returns the best-val checkpoint."""
    loss_cfg = loss_cfg or LossConfig(lam=0.0)
    if train_cfg.crop % 2**net_cfg.levels:
        raise ValueError(f"crop {train_cfg.crop} not divisible by 2^{net_cfg.levels}")
    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    net = build_deblur_net(net_cfg)
    train_ex = load_examples(index, "train")
    val_ex = load_examples(index, "val") or train_ex
    if not train_ex:
        raise ValueError("empty train split")
    opt = torch.optim.Adam(net.parameters(), lr=train_cfg.learning_rate, betas=(0.9, 0.999))
    history: list[dict] = []
    best_state = copy.deepcopy(net.state_dict())
    best_val = float("inf")
    best_epoch = -1
    for epoch in range(train_cfg.epochs):
        net.train()
        order = rng.permutation(len(train_ex))
        losses = []
        for lo in range(0, len(order), train_cfg.batch_size):
            batch = [train_ex[i] for i in order[lo : lo + train_cfg.batch_size]]
            x, y = _deblur_batch(_prepare_crops(batch, train_cfg, rng), net_cfg)
            opt.zero_grad()
            pred = torch.exp(x[:, :1] + net(x))
            loss = total_loss(pred, y, loss_cfg)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
            losses.append(float(loss))
        val_loss, val_psnr = _validate_deblur(net, val_ex, net_cfg, loss_cfg)
        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "val_loss": val_loss,
                "val_psnr": val_psnr,
            }
        )
        if val_loss < best_val:
            best_val = val_loss
            best_state = copy.deepcopy(net.state_dict())
            best_epoch = epoch
    net.load_state_dict(best_state)
    net.eval()
    if out_dir is not None:
        _write_log(Path(out_dir), history)
    return Checkpoint.from_network(
        net,
        metadata={
            "seed": train_cfg.seed,
            "epochs": train_cfg.epochs,
            "best_epoch": best_epoch,
            "history": history,
        },
    )


def _validate_deblur(net, examples, net_cfg, loss_cfg) -> tuple[float, float]:
    net.eval()
    losses, psnrs = [], []
    with torch.no_grad():
        for ex in examples:
            x, y = _deblur_batch([ex], net_cfg)
            pred = torch.exp(x[:, :1] + net(x))
            losses.append(float(total_loss(pred, y, loss_cfg)))
            psnrs.append(psnr(np.clip(pred[0, 0].numpy(), 0, 1), ex.sharp))
    return float(np.mean(losses)), float(np.mean(psnrs))


def _hfr_step_voxels(ex: TrainExample, bins: int) -> list[np.ndarray]:
    """Per-step voxel channels over (t_{k-1}, t_k], already normalized later."""
    t0 = ex.window[0]
    bounds = [t0] + list(ex.hfr_t)
    out = []
    for a, b in zip(bounds, bounds[1:]):
        sub = slice_events(ex.events, a + 1, b + 1)
        out.append(voxelize(sub, (a + 1, b + 1), bins).values)
    return out


def _hfr_batch(
    examples: list[TrainExample], net_cfg: NetworkConfig
) -> tuple[torch.Tensor, list[torch.Tensor], list[torch.Tensor]]:
    """Initial log frames, per-step voxel tensors, per-step target tensors."""
    q = len(examples[0].hfr)
    start = torch.stack(
        [_log_tensor(ex.sharp, net_cfg.log_eps)[None] for ex in examples]
    )
    voxels, targets = [], []
    per_ex = [_hfr_step_voxels(ex, net_cfg.bins) for ex in examples]
    for k in range(q):
        vox = np.stack(
            [
                np.clip(v[k].astype(np.float32) / net_cfg.voxel_scale, -1.0, 1.0)
                for v in per_ex
            ]
        )
        voxels.append(torch.from_numpy(vox))
        targets.append(
            torch.from_numpy(
                np.stack([ex.hfr[k].astype(np.float32)[None] for ex in examples])
            )
        )
    return start, voxels, targets


def _unrolled_hfr_loss(net, start, voxels, targets, loss_cfg) -> torch.Tensor:
    log_frame = start
    state = None
    terms = []
    for vox, target in zip(voxels, targets):
        x = torch.cat([log_frame, vox], dim=1)
        residual, state = net(x, state)
        log_frame = log_frame + residual
        terms.append(total_loss(torch.exp(log_frame), target, loss_cfg))
    return torch.stack(terms).mean()


def train_hfr(
    index: DatasetIndex,
    net_cfg: NetworkConfig,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig | None = None,
    out_dir: str | Path | None = None,
) -> Checkpoint:
    """Train the Conv-LSTM generator on self-fed unrolled sequences."""
    loss_cfg = loss_cfg or LossConfig(lam=0.0)
    if train_cfg.crop % 2**net_cfg.levels:
        raise ValueError(f"crop {train_cfg.crop} not divisible by 2^{net_cfg.levels}")
    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    net = build_hfr_net(net_cfg)
    train_ex = load_examples(index, "train")
    val_ex = load_examples(index, "val") or train_ex
    if not train_ex:
        raise ValueError("empty train split")
    if any(len(ex.hfr) != len(train_ex[0].hfr) for ex in train_ex):
        raise ValueError("all sequences must share one target length")
    opt = torch.optim.Adam(net.parameters(), lr=train_cfg.learning_rate, betas=(0.9, 0.999))
    history: list[dict] = []
    best_state = copy.deepcopy(net.state_dict())
    best_val = float("inf")
    best_epoch = -1
    for epoch in range(train_cfg.epochs):
        net.train()
        order = rng.permutation(len(train_ex))
        losses = []
        for lo in range(0, len(order), train_cfg.batch_size):
            batch = [train_ex[i] for i in order[lo : lo + train_cfg.batch_size]]
            start, voxels, targets = _hfr_batch(
                _prepare_crops(batch, train_cfg, rng), net_cfg
            )
            opt.zero_grad()
            loss = _unrolled_hfr_loss(net, start, voxels, targets, loss_cfg)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
            losses.append(float(loss))
        val_loss, val_psnr = _validate_hfr(net, val_ex, net_cfg, loss_cfg)
        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "val_loss": val_loss,
                "val_psnr": val_psnr,
            }
        )
        if val_loss < best_val:
            best_val = val_loss
            best_state = copy.deepcopy(net.state_dict())
            best_epoch = epoch
    net.load_state_dict(best_state)
    net.eval()
    if out_dir is not None:
        _write_log(Path(out_dir), history)
    return Checkpoint.from_network(
        net,
        metadata={
            "seed": train_cfg.seed,
            "epochs": train_cfg.epochs,
            "best_epoch": best_epoch,
            "history": history,
        },
    )


def _validate_hfr(net, examples, net_cfg, loss_cfg) -> tuple[float, float]:
    net.eval()
    losses, psnrs = [], []
    with torch.no_grad():
        for ex in examples:
            start, voxels, targets = _hfr_batch([ex], net_cfg)
            losses.append(
                float(_unrolled_hfr_loss(net, start, voxels, targets, loss_cfg))
            )
            log_frame = start
            state = None
            for vox, target in zip(voxels, targets):
                residual, state = net(torch.cat([log_frame, vox], dim=1), state)
                log_frame = log_frame + residual
                psnrs.append(
                    psnr(np.clip(torch.exp(log_frame)[0, 0].numpy(), 0, 1), target[0, 0].numpy())
                )
    return float(np.mean(losses)), float(np.mean(psnrs))
