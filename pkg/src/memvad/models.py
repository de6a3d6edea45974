"""Encoder/decoder networks with an optional memory read between them."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from memvad import memory as mem

TASKS = ("reconstruction", "prediction", "denoise_reconstruction")


@dataclass
class ModelConfig:
    task: str = "prediction"
    use_memory: bool = True
    use_skips: Optional[bool] = None
    input_frames: Optional[int] = None
    memory_size: int = 10
    feature_dim: int = 512
    widths: Sequence[int] = (64, 128, 256)
    image_channels: int = 3
    noise_ratio: float = 0.0
    normalize_queries: bool = False

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.use_skips is None:
            self.use_skips = self.task != "reconstruction"
        if self.input_frames is None:
            self.input_frames = 4 if self.task == "prediction" else 1
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 3:
            raise ValueError("widths must list the three pre-bottleneck stage widths")
        if self.task == "prediction" and self.input_frames != 4:
            raise ValueError("prediction consumes exactly 4 input frames")
        if self.task != "prediction" and self.input_frames != 1:
            raise ValueError(f"{self.task} consumes exactly 1 input frame")
        if self.task == "reconstruction" and self.use_skips:
            raise ValueError("plain reconstruction has no skip connections; use denoise_reconstruction")
        if not 0.0 <= self.noise_ratio < 1.0:
            raise ValueError(f"noise_ratio must lie in [0, 1), got {self.noise_ratio}")
        if self.memory_size < 2 or self.feature_dim < 1:
            raise ValueError("memory needs M >= 2 items of dimension C >= 1")

    @property
    def in_channels(self) -> int:
        return self.input_frames * self.image_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


def desk_config(**overrides) -> ModelConfig:
    """Small profile for 64x64 inputs that trains on a laptop CPU."""
    params = dict(feature_dim=64, widths=(16, 32, 64), memory_size=10)
    params.update(overrides)
    return ModelConfig(**params)


def _block(cin: int, cout: int, last_activation: bool = True) -> nn.Sequential:
    layers = [
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
    ]
    if last_activation:
        layers += [nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]
    return nn.Sequential(*layers)


def _upsample(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.ConvTranspose2d(cin, cout, 3, stride=2, padding=1, output_padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class Encoder(nn.Module):
    def __init__(self, in_channels: int, widths: Sequence[int], feature_dim: int):
        super().__init__()
        w1, w2, w3 = widths
        self.stage1 = _block(in_channels, w1)
        self.stage2 = _block(w1, w2)
        self.stage3 = _block(w2, w3)
        # queries come out without a trailing activation so they can be signed
        self.stage4 = _block(w3, feature_dim, last_activation=False)
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        s1 = self.stage1(x)
        s2 = self.stage2(self.pool(s1))
        s3 = self.stage3(self.pool(s2))
        feat = self.stage4(self.pool(s3))
        return feat, [s1, s2, s3]


class Decoder(nn.Module):
    def __init__(
        self, in_depth: int, feature_dim: int, widths: Sequence[int], out_channels: int, use_skips: bool
    ):
        super().__init__()
        w1, w2, w3 = widths
        k = 2 if use_skips else 1
        self.use_skips = use_skips
        # first layer maps 2C (with memory) or C (without) down to C
        self.entry = _block(in_depth, feature_dim)
        self.up3 = _upsample(feature_dim, w3)
        self.dec3 = _block(w3 * k, w3)
        self.up2 = _upsample(w3, w2)
        self.dec2 = _block(w2 * k, w2)
        self.up1 = _upsample(w2, w1)
        self.dec1 = _block(w1 * k, w1)
        self.head = nn.Conv2d(w1, out_channels, 3, padding=1)

    def forward(self, x, skips=None):
        if self.use_skips and skips is None:
            raise ValueError("decoder was built with skip connections but none were given")
        x = self.entry(x)
        x = self.up3(x)
        if self.use_skips:
            x = torch.cat([x, skips[2]], dim=1)
        x = self.up2(self.dec3(x))
        if self.use_skips:
            x = torch.cat([x, skips[1]], dim=1)
        x = self.up1(self.dec2(x))
        if self.use_skips:
            x = torch.cat([x, skips[0]], dim=1)
        return torch.tanh(self.head(self.dec1(x)))


@dataclass
class ForwardResult:
    output: torch.Tensor
    queries: Optional[torch.Tensor] = None  # (B, K, C)
    match_weights: Optional[torch.Tensor] = None  # (B, K, M)
    update_weights: Optional[torch.Tensor] = None  # (B, M, K), softmax within each sample
    feature_shape: tuple = field(default=())


def flatten_features(features: torch.Tensor) -> torch.Tensor:
    """``(B, C, H', W') -> (B, K, C)`` with K enumerated row-major."""
    b, c, h, w = features.shape
    return features.reshape(b, c, h * w).transpose(1, 2)


def fuse(features: torch.Tensor, read_result: torch.Tensor) -> torch.Tensor:
    """Depth-wise concatenation of the encoder features with the memory read."""
    b, c, h, w = features.shape
    if read_result.shape != (b, h * w, c):
        raise ValueError(
            f"read result {tuple(read_result.shape)} cannot be laid out as {(b, h * w, c)}"
        )
    read_map = read_result.transpose(1, 2).reshape(b, c, h, w)
    return torch.cat([features, read_map], dim=1)


class MemoryGuidedNet(nn.Module):
    """Encoder, memory read and decoder for all task variants."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        C = config.feature_dim
        self.encoder = Encoder(config.in_channels, config.widths, C)
        self.decoder = Decoder(
            2 * C if config.use_memory else C,
            C,
            config.widths,
            config.image_channels,
            config.use_skips,
        )

    def encode(self, frames: torch.Tensor):
        if frames.ndim != 4 or frames.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected (B, {self.config.in_channels}, H, W) input, got {tuple(frames.shape)}"
            )
        if frames.shape[2] % 8 or frames.shape[3] % 8:
            raise ValueError(f"spatial size {tuple(frames.shape[2:])} must be divisible by 8")
        feat, skips = self.encoder(frames)
        return feat, (skips if self.config.use_skips else None)

    def decode(self, fused: torch.Tensor, skips=None) -> torch.Tensor:
        expected = self.config.feature_dim * (2 if self.config.use_memory else 1)
        if fused.shape[1] != expected:
            raise ValueError(f"decoder expects depth {expected}, got {fused.shape[1]}")
        return self.decoder(fused, skips)

    def forward(self, frames: torch.Tensor, bank: Optional[mem.BankLike] = None) -> ForwardResult:
        feat, skips = self.encode(frames)
        if not self.config.use_memory:
            return ForwardResult(self.decode(feat, skips), feature_shape=tuple(feat.shape))
        if bank is None:
            raise ValueError("memory-enabled model needs a memory bank")
        queries = flatten_features(feat)
        scores = mem.correlate(bank, queries, self.config.normalize_queries)
        w = mem.match_weights(scores)
        v = mem.update_weights(scores)
        fused = fuse(feat, mem.read(bank, w))
        return ForwardResult(self.decode(fused, skips), queries, w, v, tuple(feat.shape))


def skip_ablation_probe(
    model: MemoryGuidedNet,
    frames: torch.Tensor,
    bank: Optional[mem.BankLike] = None,
    mode: str = "zeros",
    seed: int = 0,
) -> dict:
    """Replace skips 2 and 3 with zeros/ones/random and measure the output change.

    Returns the mean absolute change and max absolute change of the output.
    """
    if not model.config.use_skips:
        raise ValueError("skip ablation needs a model with skip connections")
    gen = torch.Generator().manual_seed(seed)
    model.eval()
    with torch.no_grad():
        base = model(frames, bank).output
        feat, skips = model.encode(frames)
        replaced = list(skips)
        for i in (1, 2):
            s = skips[i]
            if mode == "zeros":
                replaced[i] = torch.zeros_like(s)
            elif mode == "ones":
                replaced[i] = torch.ones_like(s)
            elif mode == "random":
                replaced[i] = torch.randn(s.shape, generator=gen, dtype=s.dtype)
            else:
                raise ValueError(f"unknown ablation mode {mode!r}")
        if model.config.use_memory:
            queries = flatten_features(feat)
            w = mem.match_weights(mem.correlate(bank, queries, model.config.normalize_queries))
            feat = fuse(feat, mem.read(bank, w))
        probed = model.decode(feat, replaced)
    diff = (probed - base).abs()
    return {"mode": mode, "mean_abs_change": float(diff.mean()), "max_abs_change": float(diff.max())}


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
