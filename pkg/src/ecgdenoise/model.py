"""The denoising network: U-Net encoder/decoder around a transformer bottleneck.

Channel plan doubles per level from ``base_channels`` (c, 2c, 4c, 8c, 16c);
the deepest feature map is flipped to token-major layout, enriched with a
fixed sinusoidal positional table, run through the transformer encoder stack,
flipped back, and decoded with skip concatenations mirroring the encoder.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .layers import (
    BatchNorm1d,
    Conv1d,
    ConvTranspose1d,
    TransformerEncoderLayer,
    maxpool1d,
    positional_encoding,
)
from .tensor import ShapeMismatch, Tensor, add, concat_channels, relu, transpose_last

__all__ = ["ModelConfig", "TransformerUNet1D", "save_checkpoint", "load_checkpoint"]


class ConfigError(ValueError):
    """Architecture hyperparameters that cannot be assembled."""


@dataclass
class ModelConfig:
    base_channels: int = 16
    depth: int = 4
    transformer_layers: int = 2
    heads: int = 4
    d_ff_ratio: int = 4
    input_len: int = 3600
    in_channels: int = 1
    out_channels: int = 1
    seed: int = 0

    @property
    def bottleneck_dim(self) -> int:
        return self.base_channels * 2**self.depth

    @property
    def token_count(self) -> int:
        return self.input_len // 2**self.depth

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")
        if self.input_len % 2**self.depth != 0:
            raise ConfigError(
                f"input_len {self.input_len} not divisible by 2^depth = {2 ** self.depth}"
            )
        if self.bottleneck_dim % self.heads != 0:
            raise ConfigError(
                f"heads {self.heads} must divide bottleneck dim {self.bottleneck_dim}"
            )
        if self.bottleneck_dim % 2 != 0:
            raise ConfigError("bottleneck dim must be even for the positional table")


class DoubleConv:
    """Two (conv k3 p1 -> batchnorm -> relu) stages."""

    def __init__(self, in_channels: int, out_channels: int, *, rng: np.random.Generator):
        self.conv1 = Conv1d(in_channels, out_channels, 3, padding=1, rng=rng)
        self.bn1 = BatchNorm1d(out_channels)
        self.conv2 = Conv1d(out_channels, out_channels, 3, padding=1, rng=rng)
        self.bn2 = BatchNorm1d(out_channels)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        x = relu(self.bn1.forward(self.conv1.forward(x), training))
        return relu(self.bn2.forward(self.conv2.forward(x), training))

    def parameters(self):
        out = []
        for prefix, sub in (("conv1", self.conv1), ("bn1", self.bn1),
                            ("conv2", self.conv2), ("bn2", self.bn2)):
            out.extend((f"{prefix}.{name}", t) for name, t in sub.parameters())
        return out

    def state_arrays(self):
        return [(f"bn1.{n}", a) for n, a in self.bn1.state_arrays()] + [
            (f"bn2.{n}", a) for n, a in self.bn2.state_arrays()
        ]


class Down:
    """Halve the length, then double-conv to twice the channels."""

    def __init__(self, in_channels: int, out_channels: int, *, rng: np.random.Generator):
        self.block = DoubleConv(in_channels, out_channels, rng=rng)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        return self.block.forward(maxpool1d(x, 2), training)

    def parameters(self):
        return [(f"block.{n}", t) for n, t in self.block.parameters()]

    def state_arrays(self):
        return [(f"block.{n}", a) for n, a in self.block.state_arrays()]


class Up:
    """Double the length by transposed conv, concatenate the skip, double-conv."""

    def __init__(self, in_channels: int, *, rng: np.random.Generator):
        self.tconv = ConvTranspose1d(in_channels, in_channels // 2, 2, stride=2, rng=rng)
        self.block = DoubleConv(in_channels, in_channels // 2, rng=rng)

    def forward(self, x: Tensor, skip: Tensor, training: bool) -> Tensor:
        up = self.tconv.forward(x)
        return self.block.forward(concat_channels(up, skip), training)

    def parameters(self):
        return [(f"tconv.{n}", t) for n, t in self.tconv.parameters()] + [
            (f"block.{n}", t) for n, t in self.block.parameters()
        ]

    def state_arrays(self):
        return [(f"block.{n}", a) for n, a in self.block.state_arrays()]


class TransformerUNet1D:
    """Shape-preserving denoiser for (B, 1, input_len) segments."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        c = config.base_channels

        self.inc = DoubleConv(config.in_channels, c, rng=rng)
        self.downs = [
            Down(c * 2**i, c * 2 ** (i + 1), rng=rng) for i in range(config.depth)
        ]
        d = config.bottleneck_dim
        self.pos_table = Tensor(positional_encoding(config.token_count, d))
        self.encoder_layers = [
            TransformerEncoderLayer(d, config.heads, config.d_ff_ratio * d, rng=rng)
            for _ in range(config.transformer_layers)
        ]
        self.ups = [Up(c * 2 ** (i + 1), rng=rng) for i in reversed(range(config.depth))]
        self.out_conv = Conv1d(c, config.out_channels, 1, rng=rng)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        cfg = self.config
        if x.ndim != 3 or x.shape[1] != cfg.in_channels or x.shape[2] != cfg.input_len:
            raise ShapeMismatch(
                "model", x.shape, (x.shape[0] if x.ndim == 3 else -1, cfg.in_channels, cfg.input_len)
            )
        skips = [self.inc.forward(x, training)]
        for down in self.downs:
            skips.append(down.forward(skips[-1], training))

        z = skips.pop()  # deepest features (B, d, T)
        tokens = transpose_last(z)  # token-major (B, T, d)
        tokens = add(tokens, self.pos_table)
        for layer in self.encoder_layers:
            tokens = layer.forward(tokens)
        z = transpose_last(tokens)

        for up in self.ups:
            z = up.forward(z, skips.pop(), training)
        return self.out_conv.forward(z)

    def parameters(self):
        """Stable, deterministic (name, tensor) ordering; each exactly once."""
        out = [(f"inc.{n}", t) for n, t in self.inc.parameters()]
        for i, down in enumerate(self.downs, start=1):
            out.extend((f"down{i}.{n}", t) for n, t in down.parameters())
        for i, layer in enumerate(self.encoder_layers, start=1):
            out.extend((f"enc{i}.{n}", t) for n, t in layer.parameters())
        for i, up in enumerate(self.ups, start=1):
            out.extend((f"up{i}.{n}", t) for n, t in up.parameters())
        out.extend((f"out.{n}", t) for n, t in self.out_conv.parameters())
        return out

    def state_arrays(self):
        """Batchnorm running statistics, in the same stable order."""
        out = [(f"inc.{n}", a) for n, a in self.inc.state_arrays()]
        for i, down in enumerate(self.downs, start=1):
            out.extend((f"down{i}.{n}", a) for n, a in down.state_arrays())
        for i, up in enumerate(self.ups, start=1):
            out.extend((f"up{i}.{n}", a) for n, a in up.state_arrays())
        return out

    def num_parameters(self) -> int:
        return sum(t.size for _, t in self.parameters())

    def zero_grad(self) -> None:
        for _, t in self.parameters():
            t.zero_grad()


# ---------------------------------------------------------------------------
# checkpoints: <prefix>.manifest.json + <prefix>.params.bin


def _entry(name: str, kind: str, arr: np.ndarray, offset: int) -> dict:
    return {"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset}


def save_checkpoint(prefix: str, model: TransformerUNet1D, *, optimizer_arrays=None,
                    rng_state=None, extra=None) -> None:
    """Write parameters (and optional optimizer arrays) as little-endian f64.

    `optimizer_arrays` is an iterable of (name, array); `extra` is any
    JSON-serializable training metadata.
    """
    entries = []
    blobs = []
    offset = 0
    for name, tensor in model.parameters():
        entries.append(_entry(name, "param", tensor.data, offset))
        blobs.append(tensor.data.astype("<f8").tobytes())
        offset += tensor.data.size * 8
    for name, arr in model.state_arrays():
        entries.append(_entry(name, "buffer", arr, offset))
        blobs.append(arr.astype("<f8").tobytes())
        offset += arr.size * 8
    for name, arr in optimizer_arrays or []:
        entries.append(_entry(name, "optim", arr, offset))
        blobs.append(arr.astype("<f8").tobytes())
        offset += arr.size * 8

    manifest = {
        "format_version": 1,
        "config": asdict(model.config),
        "rng_state": rng_state,
        "extra": extra or {},
        "entries": entries,
    }
    with open(f"{prefix}.manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(f"{prefix}.params.bin", "wb") as fh:
        fh.write(b"".join(blobs))


def load_checkpoint(prefix: str):
    """Rebuild the model from a checkpoint; returns (model, manifest, optim_arrays)."""
    with open(f"{prefix}.manifest.json") as fh:
        manifest = json.load(fh)
    raw = np.fromfile(f"{prefix}.params.bin", dtype="<f8")

    model = TransformerUNet1D(ModelConfig(**manifest["config"]))
    params = dict(model.parameters())
    buffers = dict(model.state_arrays())
    optim_arrays = {}
    for entry in manifest["entries"]:
        size = int(np.prod(entry["shape"]))
        start = entry["offset"] // 8
        arr = raw[start : start + size].reshape(entry["shape"])
        if entry["kind"] == "param":
            target = params[entry["name"]]
            if list(target.shape) != entry["shape"]:
                raise ConfigError(f"checkpoint shape mismatch for {entry['name']}")
            target.data[...] = arr
        elif entry["kind"] == "buffer":
            buffers[entry["name"]][...] = arr
        else:
            optim_arrays[entry["name"]] = arr.copy()
    return model, manifest, optim_arrays
