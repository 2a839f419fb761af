"""Depth-completion networks (ScaffNet and its segmentation-guided variant) and PoseNet."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

import numpy as np

from . import functional as F
from .nn import (Conv2d, ConvBlock, Linear, Module, count_parameters, load_checkpoint,
                 save_checkpoint)
from .preprocess import DEFAULT_SCALES, outlier_filter, spp_densify
from .records import one_hot
from .tensor import Tensor, as_tensor, concat

__all__ = [
    "ModelKind", "NetworkConfig", "SppFusion", "SegEncoder", "EncoderDecoder", "DepthNet", "PoseNet",
    "count_parameters", "save_model", "load_model", "ConfigMismatchError",
]


class ConfigMismatchError(ValueError):
    pass


class ModelKind(str, enum.Enum):
    SCAFFNET = "scaffnet"
    SEGGUIDED = "segguided"


@dataclass
class NetworkConfig:
    encoder_channels: tuple = (16, 32, 64, 128, 256)
    spp_scales: tuple = DEFAULT_SCALES
    fusion_channels: int = 32
    class_count: int = 6
    seg_feature_channels: int = 32
    min_depth: float = 0.1
    filter_window: int = 7
    filter_margin_m: float = 1.5
    posenet_channels: tuple = (16, 32, 64, 128, 256)

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.spp_scales = tuple(int(k) for k in self.spp_scales)
        self.posenet_channels = tuple(int(c) for c in self.posenet_channels)
        if len(self.encoder_channels) != 5:
            raise ValueError(f"encoder needs exactly 5 widths, got {self.encoder_channels}")
        if self.seg_feature_channels != self.fusion_channels:
            raise ValueError("seg_feature_channels must equal fusion_channels for the additive merge")
        if self.min_depth <= 0:
            raise ValueError("min_depth must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


class SppFusion(Module):
    """Fuse the raw and pooled depth maps into a feature map."""

    def __init__(self, config: NetworkConfig, rng):
        self.n_maps = 1 + len(config.spp_scales)
        self.block = ConvBlock(self.n_maps, config.fusion_channels, rng=rng)

    def forward(self, stack: np.ndarray) -> Tensor:
        if stack.shape[1] != self.n_maps:
            raise ValueError(f"SPP stack has {stack.shape[1]} maps, network expects {self.n_maps}")
        return self.block(as_tensor(stack))


class SegEncoder(Module):
    """One 3x3 convolution from one-hot classes to the fusion feature width."""

    def __init__(self, config: NetworkConfig, rng):
        self.class_count = config.class_count
        self.conv = Conv2d(config.class_count, config.seg_feature_channels, 3, rng=rng)

    def forward(self, labels: np.ndarray) -> Tensor:
        labels = np.asarray(labels)
        if labels.size and labels.max() >= self.class_count:
            raise ValueError(f"class id {labels.max()} >= class_count {self.class_count}")
        return self.conv(Tensor(one_hot(labels, self.class_count, self.conv.weight.dtype)))


class EncoderDecoder(Module):
    """Five stride-2 encoder blocks and five upsampling decoder steps with concatenated skips."""

    def __init__(self, config: NetworkConfig, rng):
        widths = [config.fusion_channels, *config.encoder_channels]
        self.encoder = [ConvBlock(widths[i], widths[i + 1], stride=2, rng=rng) for i in range(5)]
        self.up = []
        self.fuse = []
        prev = widths[5]
        for level in range(4, -1, -1):
            skip = widths[level]
            self.up.append(ConvBlock(prev, skip, rng=rng))
            self.fuse.append(ConvBlock(2 * skip, skip, rng=rng))
            prev = skip
        self.head = Conv2d(prev, 1, 3, rng=rng)
        self.min_depth = config.min_depth

    def forward(self, features: Tensor) -> Tensor:
        h, w = features.shape[2:]
        if h % 32 or w % 32:
            raise ValueError(f"spatial size {h}x{w} must be divisible by 32; pad or crop the input")
        skips = [features]
        x = features
        for block in self.encoder:
            x = block(x)
            skips.append(x)
        for i, (up, fuse) in enumerate(zip(self.up, self.fuse)):
            x = up(F.upsample_nearest2x(x))
            x = fuse(concat([x, skips[4 - i]], axis=1))
        return self.head(x).relu() + self.min_depth


class DepthNet(Module):
    """Filter, pool, fuse (plus segmentation features), then encode-decode to metric depth."""

    def __init__(self, kind: ModelKind | str = ModelKind.SEGGUIDED, config: NetworkConfig | None = None,
                 seed: int = 0):
        self.kind = ModelKind(kind)
        self.config = config or NetworkConfig()
        rng = np.random.default_rng(seed)
        self.spp_fusion = SppFusion(self.config, rng)
        self.encoder_decoder = EncoderDecoder(self.config, rng)
        # separate stream so shared layers initialise identically for both kinds
        self.seg_encoder = (SegEncoder(self.config, np.random.default_rng([seed, 1]))
                            if self.kind is ModelKind.SEGGUIDED else None)

    def features(self, sparse: np.ndarray, seg: np.ndarray | None = None) -> Tensor:
        sparse = np.asarray(sparse)
        if sparse.ndim == 2:
            sparse = sparse[None]
        filtered = outlier_filter(sparse, self.config.filter_window, self.config.filter_margin_m)
        stack = spp_densify(filtered, self.config.spp_scales).as_array()
        feats = self.spp_fusion(stack.astype(self.spp_fusion.block.conv.weight.dtype))
        if self.seg_encoder is not None:
            if seg is None:
                raise ValueError("the segmentation-guided model needs a segmentation input")
            seg = np.asarray(seg)
            feats = feats + self.seg_encoder(seg[None] if seg.ndim == 2 else seg)
        return feats

    def forward(self, sparse: np.ndarray, seg: np.ndarray | None = None) -> Tensor:
        return self.encoder_decoder(self.features(sparse, seg))

    def meta(self) -> dict:
        return {"model": "depth", "kind": self.kind.value, "config": self.config.to_dict()}


class PoseNet(Module):
    """Relative 6-DoF pose (axis-angle, translation) between two frames.

    The head output is multiplied by ``output_scale`` on every call, so the
    initial poses are near identity and one optimiser step moves a pose by
    about ``output_scale`` times what it would move an unscaled head.
    """

    def __init__(self, config: NetworkConfig | None = None, seed: int = 0, init_scale: float = 1.0,
                 output_scale: float = 0.01):
        self.config = config or NetworkConfig()
        self.output_scale = output_scale
        rng = np.random.default_rng([seed, 2])
        widths = [6, *self.config.posenet_channels]
        self.blocks = [ConvBlock(widths[i], widths[i + 1], stride=2, rng=rng) for i in range(len(widths) - 1)]
        self.head = Linear(widths[-1], 6, rng=rng, init_scale=init_scale)

    def forward(self, image_a, image_b) -> Tensor:
        a, b = as_tensor(image_a).data, as_tensor(image_b).data
        if a.shape != b.shape:
            raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
        dtype = self.head.weight.dtype
        x = Tensor(((np.concatenate([a, b], axis=1) - 0.45) / 0.225).astype(dtype))
        for block in self.blocks:
            x = block(x)
        return self.head(x.mean(axis=(2, 3))) * self.output_scale

    def meta(self) -> dict:
        return {"model": "pose", "config": self.config.to_dict()}


def save_model(path: str, model: Module, extra: dict | None = None) -> None:
    meta = {**model.meta(), **(extra or {})}
    save_checkpoint(path, model.state_dict(), meta)


def load_model(path: str, into: Module | None = None) -> Module:
    """Load a checkpoint, either into ``into`` (configs must match) or into a fresh model."""
    arrays, meta = load_checkpoint(path)
    config = NetworkConfig.from_dict(meta["config"])
    if into is None:
        into = PoseNet(config) if meta.get("model") == "pose" else DepthNet(meta["kind"], config)
    else:
        own = into.meta()
        if any(own.get(key) != meta.get(key) for key in ("model", "kind", "config")):
            raise ConfigMismatchError(f"checkpoint {path} was written for a different network configuration")
    into.load_state_dict(arrays)
    return into
