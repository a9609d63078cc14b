"""Residual U-Net architectures for deblurring and frame generation.

Both networks share one encoder/decoder skeleton with a global additive
skip: they predict a residual that is added to the input log image, so a
zero-initialized head makes them exact identity maps.  The deblurring
variant extracts features with dense blocks; the video variant swaps
those for Conv-LSTM cells that carry state across generated frames.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .events import DEFAULT_LOG_EPS, LogFrame, VoxelGrid

CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Corrupt checkpoint file or config/shape mismatch on load."""


@dataclass(frozen=True)
class NetworkConfig:
    """Sizes of the residual U-Net.

    ``lstm_hidden`` overrides the per-level Conv-LSTM widths; by default
    they mirror the dense encoder block outputs so both variants share
    the same transition and decoder widths.
    """

    bins: int = 6
    levels: int = 3
    stem_channels: int = 32
    dense_layers: int = 4
    growth: int = 12
    lstm_hidden: tuple[int, ...] | None = None
    head_init: str = "zero"
    log_eps: float = DEFAULT_LOG_EPS
    voxel_scale: float = 10.0

    def __post_init__(self) -> None:
        if self.bins < 1 or self.levels < 1:
            raise ValueError("bins and levels must be >= 1")
        if min(self.stem_channels, self.dense_layers, self.growth) < 1:
            raise ValueError("channel counts must be >= 1")
        if self.head_init not in ("zero", "random"):
            raise ValueError(f"unknown head_init {self.head_init!r}")
        if self.lstm_hidden is not None:
            object.__setattr__(self, "lstm_hidden", tuple(int(h) for h in self.lstm_hidden))
            if len(self.lstm_hidden) != self.levels:
                raise ValueError("lstm_hidden needs one width per level")

    def level_channels(self, kind: str) -> list[tuple[int, int, int]]:
        """Per level: (input, block output, transition output) channels."""
        out = []
        enc_in = self.stem_channels
        for i in range(self.levels):
            block_out = enc_in + self.dense_layers * self.growth
            if kind == "hfr" and self.lstm_hidden is not None:
                block_out = self.lstm_hidden[i]
            trans_out = block_out // 2
            out.append((enc_in, block_out, trans_out))
            enc_in = trans_out
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["lstm_hidden"] is not None:
            d["lstm_hidden"] = list(d["lstm_hidden"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        if d.get("lstm_hidden") is not None:
            d["lstm_hidden"] = tuple(d["lstm_hidden"])
        return cls(**d)


@dataclass
class RecurrentState:
    """Per-level (hidden, cell) activations of the HFR net."""

    levels: list[tuple[torch.Tensor, torch.Tensor]]

    def detach(self) -> "RecurrentState":
        return RecurrentState([(h.detach(), c.detach()) for h, c in self.levels])


class DenseBlock(nn.Module):
    """L conv layers, each producing ``growth`` channels concatenated to its input."""

    def __init__(self, in_channels: int, n_layers: int, growth: int):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv2d(in_channels + j * growth, growth, 3, padding=1) for j in range(n_layers)
        )

    def forward(self, x):
        for conv in self.convs:
            x = torch.cat([x, torch.relu(conv(x))], dim=1)
        return x


class ConvLSTMCell(nn.Module):
    """Convolutional LSTM cell with 3x3 gate kernels."""

    def __init__(self, in_channels: int, hidden: int):
        super().__init__()
        self.hidden = hidden
        self.gates = nn.Conv2d(in_channels + hidden, 4 * hidden, 3, padding=1)

    def forward(self, x, state):
        h_prev, c_prev = state
        gi, gf, go, gc = self.gates(torch.cat([x, h_prev], dim=1)).chunk(4, dim=1)
        c = torch.sigmoid(gf) * c_prev + torch.sigmoid(gi) * torch.tanh(gc)
        h = torch.sigmoid(go) * torch.tanh(c)
        return h, (h, c)

    def zero_state(self, batch: int, height: int, width: int, ref: torch.Tensor):
        shape = (batch, self.hidden, height, width)
        z = torch.zeros(shape, dtype=ref.dtype, device=ref.device)
        return (z, z.clone())


class ResidualUNet(nn.Module):
    """Shared skeleton; predicts the residual for the input's image channel.

    The caller adds the residual back onto the log image (the global
    skip), which keeps the inference helpers bit-exact at zero init.
    """

    def __init__(self, config: NetworkConfig, recurrent: bool):
        super().__init__()
        self.config = config
        self.recurrent = recurrent
        self.kind = "hfr" if recurrent else "deblur"
        chans = config.level_channels(self.kind)
        self.stem = nn.Conv2d(1 + config.bins, config.stem_channels, 3, padding=1)
        self.blocks = nn.ModuleList()
        self.transitions = nn.ModuleList()
        for enc_in, block_out, trans_out in chans:
            if recurrent:
                self.blocks.append(ConvLSTMCell(enc_in, block_out))
            else:
                self.blocks.append(DenseBlock(enc_in, config.dense_layers, config.growth))
            self.transitions.append(nn.Conv2d(block_out, trans_out, 1))
        bottom = chans[-1][2]
        self.bottleneck = nn.Conv2d(bottom, bottom, 3, padding=1)
        self.up_convs = nn.ModuleList()
        self.skip_convs = nn.ModuleList()
        self.fuse_convs = nn.ModuleList()
        prev = bottom
        for enc_in, block_out, _ in reversed(chans):
            self.up_convs.append(nn.Conv2d(prev, enc_in, 3, padding=1))
            self.skip_convs.append(nn.Conv2d(block_out, enc_in, 1))
            self.fuse_convs.append(nn.Conv2d(2 * enc_in, enc_in, 3, padding=1))
            prev = enc_in
        self.head = nn.Conv2d(config.stem_channels, 1, 3, padding=1)
        if config.head_init == "zero":
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def _check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 1 + self.config.bins:
            raise ValueError(
                f"expected (N, {1 + self.config.bins}, H, W) input, got {tuple(x.shape)}"
            )
        stride = 2**self.config.levels
        if x.shape[2] % stride or x.shape[3] % stride:
            raise ValueError(f"input size {tuple(x.shape[2:])} not divisible by {stride}")

    def forward(self, x, state: RecurrentState | None = None):
        self._check_input(x)
        h = torch.relu(self.stem(x))
        skips = []
        new_levels = []
        for i, (block, trans) in enumerate(zip(self.blocks, self.transitions)):
            if self.recurrent:
                if state is None:
                    prev = block.zero_state(x.shape[0], h.shape[2], h.shape[3], h)
                else:
                    prev = state.levels[i]
                    if prev[0].shape != (x.shape[0], block.hidden, h.shape[2], h.shape[3]):
                        raise ValueError(
                            f"state shape {tuple(prev[0].shape)} does not match level {i}"
                        )
                h, nxt = block(h, prev)
                new_levels.append(nxt)
            else:
                h = block(h)
            skips.append(h)
            h = F.avg_pool2d(trans(h), 2)
        h = torch.relu(self.bottleneck(h))
        for i, (up, skip, fuse) in enumerate(zip(self.up_convs, self.skip_convs, self.fuse_convs)):
            h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
            s = skip(skips[len(skips) - 1 - i])
            h = torch.relu(fuse(torch.cat([h, s], dim=1)))
        residual = self.head(h)
        if self.recurrent:
            return residual, RecurrentState(new_levels)
        return residual


def build_deblur_net(config: NetworkConfig) -> ResidualUNet:
    """Dense-block encoder variant, for blurry-image restoration."""
    return ResidualUNet(config, recurrent=False)


def build_hfr_net(config: NetworkConfig) -> ResidualUNet:
    """Conv-LSTM encoder variant, for recurrent frame generation."""
    return ResidualUNet(config, recurrent=True)


def reset_state(net: ResidualUNet, geometry: tuple[int, int], batch: int = 1) -> RecurrentState:
    """All-zero recurrent state for an (H, W) input geometry."""
    if not net.recurrent:
        raise ValueError("reset_state only applies to the recurrent network")
    height, width = geometry
    stride = 2**net.config.levels
    if height % stride or width % stride:
        raise ValueError(f"geometry {geometry} not divisible by {stride}")
    ref = net.head.weight
    levels = []
    for i, block in enumerate(net.blocks):
        levels.append(block.zero_state(batch, height >> i, width >> i, ref))
    return RecurrentState(levels)


def voxel_to_channels(voxel: VoxelGrid, config: NetworkConfig) -> np.ndarray:
    """Normalize signed counts for network input: scale then clip to [-1, 1]."""
    return np.clip(voxel.values.astype(np.float32) / config.voxel_scale, -1.0, 1.0)


def _input_tensor(log_pixels: np.ndarray, voxel: VoxelGrid, config: NetworkConfig) -> torch.Tensor:
    if voxel.bins != config.bins:
        raise ValueError(f"voxel has {voxel.bins} bins, network expects {config.bins}")
    if voxel.values.shape[1:] != log_pixels.shape:
        raise ValueError(
            f"voxel geometry {voxel.values.shape[1:]} does not match image {log_pixels.shape}"
        )
    stack = np.concatenate(
        [log_pixels.astype(np.float32)[None], voxel_to_channels(voxel, config)], axis=0
    )
    return torch.from_numpy(stack[None])


def forward_deblur(net: ResidualUNet, blurry_log: LogFrame, voxel: VoxelGrid) -> LogFrame:
    """Predicted sharp log frame: input plus the learned residual."""
    if net.recurrent:
        raise ValueError("forward_deblur needs the dense-encoder network")
    x = _input_tensor(blurry_log.pixels, voxel, net.config)
    with torch.no_grad():
        residual = net(x)
    res = residual[0, 0].numpy().astype(np.float64)
    return LogFrame(blurry_log.pixels + res, blurry_log.epsilon)


def forward_hfr(
    net: ResidualUNet,
    frame_log: LogFrame,
    voxel: VoxelGrid,
    state: RecurrentState | None = None,
) -> tuple[LogFrame, RecurrentState]:
    """Next log frame plus updated recurrent state."""
    if not net.recurrent:
        raise ValueError("forward_hfr needs the Conv-LSTM network")
    x = _input_tensor(frame_log.pixels, voxel, net.config)
    with torch.no_grad():
        residual, new_state = net(x, state)
    res = residual[0, 0].numpy().astype(np.float64)
    return LogFrame(frame_log.pixels + res, frame_log.epsilon), new_state


@dataclass
class Checkpoint:
    """Learned parameters plus the config that produced them."""

    kind: str
    config: NetworkConfig
    parameters: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_network(cls, net: ResidualUNet, metadata: dict | None = None) -> "Checkpoint":
        params = {
            name: tensor.detach().cpu().numpy().astype("<f4")
            for name, tensor in net.state_dict().items()
        }
        return cls(net.kind, net.config, params, dict(metadata or {}))

    def save(self, path) -> None:
        manifest = {
            "format_version": CHECKPOINT_VERSION,
            "kind": self.kind,
            "config": self.config.to_dict(),
            "metadata": self.metadata,
            "parameters": {name: list(arr.shape) for name, arr in self.parameters.items()},
        }
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
            _write_member(zf, "manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode())
            for name, arr in self.parameters.items():
                buf = io.BytesIO()
                np.save(buf, np.ascontiguousarray(arr, dtype="<f4"))
                _write_member(zf, f"params/{name}.npy", buf.getvalue())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            with zipfile.ZipFile(path, "r") as zf:
                manifest = json.loads(zf.read("manifest.json"))
                params = {}
                for name, shape in manifest["parameters"].items():
                    arr = np.load(io.BytesIO(zf.read(f"params/{name}.npy")))
                    if list(arr.shape) != shape:
                        raise CheckpointError(
                            f"{path}: parameter {name} has shape {arr.shape}, manifest says {shape}"
                        )
                    params[name] = arr
        except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, ValueError) as exc:
            raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
        if manifest.get("kind") not in ("deblur", "hfr"):
            raise CheckpointError(f"{path}: unknown network kind {manifest.get('kind')!r}")
        config = NetworkConfig.from_dict(manifest["config"])
        return cls(manifest["kind"], config, params, manifest.get("metadata", {}))

    def build(self) -> ResidualUNet:
        net = build_hfr_net(self.config) if self.kind == "hfr" else build_deblur_net(self.config)
        expected = net.state_dict()
        if set(expected) != set(self.parameters):
            raise CheckpointError("checkpoint parameter names do not match the config")
        tensors = {}
        for name, ref in expected.items():
            arr = self.parameters[name]
            if tuple(arr.shape) != tuple(ref.shape):
                raise CheckpointError(
                    f"parameter {name}: shape {arr.shape} does not match config {tuple(ref.shape)}"
                )
            tensors[name] = torch.from_numpy(arr.copy())
        net.load_state_dict(tensors)
        net.eval()
        return net


def _write_member(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    # Fixed timestamp keeps checkpoint bytes reproducible.
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, payload)


def save_checkpoint(net: ResidualUNet, path, metadata: dict | None = None) -> None:
    Checkpoint.from_network(net, metadata).save(path)


def load_checkpoint(path) -> ResidualUNet:
    return Checkpoint.load(path).build()
