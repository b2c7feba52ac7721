"""Segmentation network: shared convolutional feature extractor plus
per-tract affine heads applied voxelwise.

The backbone is a small encoder-decoder: conv(in->enc), relu, 2x downsample,
conv(enc->mid), relu, dropout, 2x upsample, conv(mid->features).  Heads are
``[T, C]`` weight matrices with a ``[T]`` bias; applying a head at every
voxel is the same linear map a 1x1 convolution would compute.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .rng import RngState


@dataclass(frozen=True)
class BackboneArch:
    """Layer widths of the feature extractor."""

    in_channels: int = 9
    enc_channels: int = 16
    mid_channels: int = 32
    feature_channels: int = 16
    kernel_size: int = 3
    dropout_rate: float = 0.4

    def to_meta(self) -> dict:
        return {
            "in_channels": str(self.in_channels),
            "enc_channels": str(self.enc_channels),
            "mid_channels": str(self.mid_channels),
            "feature_channels": str(self.feature_channels),
            "kernel_size": str(self.kernel_size),
            "dropout_rate": repr(self.dropout_rate),
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "BackboneArch":
        return cls(
            in_channels=int(meta["in_channels"]),
            enc_channels=int(meta["enc_channels"]),
            mid_channels=int(meta["mid_channels"]),
            feature_channels=int(meta["feature_channels"]),
            kernel_size=int(meta["kernel_size"]),
            dropout_rate=float(meta["dropout_rate"]),
        )


def _uniform_init(rng: RngState, shape: tuple, fan_in: int) -> np.ndarray:
    half_width = 1.0 / np.sqrt(fan_in)
    return rng.generator.uniform(-half_width, half_width, shape)


@dataclass
class BackboneParams:
    """Named parameter tensors of the feature extractor, in a stable order."""

    arch: BackboneArch
    params: dict[str, Tensor]

    @classmethod
    def init_random(cls, arch: BackboneArch, rng: RngState) -> "BackboneParams":
        k = arch.kernel_size
        layers = [
            ("conv1", arch.in_channels, arch.enc_channels),
            ("conv2", arch.enc_channels, arch.mid_channels),
            ("conv3", arch.mid_channels, arch.feature_channels),
        ]
        params: dict[str, Tensor] = {}
        for name, c_in, c_out in layers:
            weight = _uniform_init(rng.child(name), (c_out, c_in, k, k), c_in * k * k)
            params[f"{name}.weight"] = Tensor(weight)
            params[f"{name}.bias"] = Tensor(np.zeros(c_out))
        return cls(arch=arch, params=params)

    @classmethod
    def init_zero(cls, arch: BackboneArch) -> "BackboneParams":
        zero = cls.init_random(arch, RngState(0))
        for tensor in zero.params.values():
            tensor.data[...] = 0.0
        return zero

    def copy(self) -> "BackboneParams":
        return BackboneParams(self.arch, {k: t.copy() for k, t in self.params.items()})

    def byte_digest(self) -> bytes:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.digest()


@dataclass
class HeadParams:
    """Affine voxel classifier: weight ``[T, C]`` and bias ``[T]``."""

    weight: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ShapeError(
                f"head expects 2-D weight and 1-D bias, got {self.weight.shape} and {self.bias.shape}")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ShapeError(
                f"head weight rows ({self.weight.shape[0]}) must equal bias length ({self.bias.shape[0]})")

    @property
    def n_tracts(self) -> int:
        return self.weight.shape[0]

    @property
    def feature_channels(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def init_random(cls, n_tracts: int, feature_channels: int, rng: RngState) -> "HeadParams":
        weight = _uniform_init(rng, (n_tracts, feature_channels), feature_channels)
        return cls(weight=Tensor(weight), bias=Tensor(np.zeros(n_tracts)))

    def copy(self) -> "HeadParams":
        return HeadParams(self.weight.copy(), self.bias.copy())


@dataclass
class SegModel:
    """Backbone plus one task head; ``task`` names the label set it segments."""

    backbone: BackboneParams
    head: HeadParams
    task: str = "novel"

    def named_params(self) -> dict[str, Tensor]:
        named = dict(self.backbone.params)
        named["head.weight"] = self.head.weight
        named["head.bias"] = self.head.bias
        return named

    def copy(self) -> "SegModel":
        return SegModel(self.backbone.copy(), self.head.copy(), self.task)

    def predict_probs(self, x: np.ndarray) -> np.ndarray:
        """Evaluation-mode probability maps for one subject or a batch."""
        feats = extract_features(Tensor(x), self.backbone, training=False, rng=None)
        return head_forward(feats, self.head).data


def _check_input(x: Tensor, arch: BackboneArch) -> None:
    if x.ndim not in (3, 4):
        raise ShapeError(f"expected [C,H,W] or [B,C,H,W] input, got shape {x.shape}")
    channels, height, width = x.shape[-3], x.shape[-2], x.shape[-1]
    if channels != arch.in_channels:
        raise ShapeError(f"input has {channels} channels, backbone expects {arch.in_channels}")
    if height % 4 or width % 4:
        raise ShapeError(f"spatial size {height}x{width} must be divisible by 4")


def extract_features(x: Tensor, backbone: BackboneParams, training: bool,
                     rng: RngState | None, dropout_rate: float | None = None) -> Tensor:
    """Map a 9-channel input to a C-channel feature map of the same size."""
    _check_input(x, backbone.arch)
    p = backbone.params
    h = ad.relu(ad.conv2d(x, p["conv1.weight"], p["conv1.bias"]))
    h = ad.avg_pool2(h)
    h = ad.relu(ad.conv2d(h, p["conv2.weight"], p["conv2.bias"]))
    if training:
        if rng is None:
            raise ValueError("training-mode feature extraction needs an RngState")
        rate = backbone.arch.dropout_rate if dropout_rate is None else dropout_rate
        h = ad.dropout(h, rate, rng, training=True)
    h = ad.upsample2(h)
    return ad.conv2d(h, p["conv3.weight"], p["conv3.bias"])


def head_logits(features: Tensor, head: HeadParams) -> Tensor:
    """Voxelwise affine map: at each voxel v the output column is W f_v + b."""
    if features.shape[-3] != head.feature_channels:
        raise ShapeError(
            f"features have {features.shape[-3]} channels, head expects {head.feature_channels}")
    n_tracts = head.n_tracts
    if features.ndim == 3:
        c, height, width = features.shape
        flat = ad.reshape(features, (c, height * width))
        logits = ad.add_row_bias(ad.matmul(head.weight, flat), head.bias)
        return ad.reshape(logits, (n_tracts, height, width))
    if features.ndim == 4:
        b, c, height, width = features.shape
        flat = ad.reshape(ad.transpose(features, (1, 0, 2, 3)), (c, b * height * width))
        logits = ad.add_row_bias(ad.matmul(head.weight, flat), head.bias)
        stacked = ad.reshape(logits, (n_tracts, b, height, width))
        return ad.transpose(stacked, (1, 0, 2, 3))
    raise ShapeError(f"expected [C,H,W] or [B,C,H,W] features, got shape {features.shape}")


def head_forward(features: Tensor, head: HeadParams) -> Tensor:
    """Probability maps: sigmoid of the head logits."""
    return ad.sigmoid(head_logits(features, head))


def model_logits(model: SegModel, x: Tensor, training: bool,
                 rng: RngState | None, dropout_rate: float | None = None) -> Tensor:
    """Full forward pass to logits; records on the active graph if any."""
    feats = extract_features(x, model.backbone, training, rng, dropout_rate)
    return head_logits(feats, model.head)


def default_arch(**overrides) -> BackboneArch:
    return replace(BackboneArch(), **overrides) if overrides else BackboneArch()
