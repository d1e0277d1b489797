"""
Segmentation branches
Toy-scale UNet (spatial branch) and YNet-style dual encoder whose second
encoder is built from Fast Fourier Convolution blocks (spectral branch).
Both map N x 3 x H x W images to N x 2 x H x W logits.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Tuple, Union

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import (
    ComplexSpectrum,
    Parameter,
    Tensor,
    affine_channels,
    as_tensor,
    concat,
    conv2d,
    irfft2,
    max_pool2d,
    normalize,
    relu,
    rfft2,
    take_channels,
    upsample_bilinear2x,
    upsample_nearest2x,
)

logger = logging.getLogger(__name__)

NUM_CLASSES = 2
MODEL_KINDS = ("unet", "ynet")


class Module:
    """Minimal container: named parameters, named buffers, train/eval mode"""

    def __init__(self):
        self.training = True

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x) -> Tensor:
        return self.forward(as_tensor(x))

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in getattr(self, "buffers", {}).items():
            yield prefix + name, value
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({f"buffer/{name}": value.copy() for name, value in self.named_buffers()})
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        expected = self.state_dict()
        missing = sorted(set(expected) - set(state))
        if missing:
            raise ShapeError(f"state is missing entries: {missing[:5]}")
        for name, p in self.named_parameters():
            if state[name].shape != p.shape:
                raise ShapeError(f"parameter {name} has shape {p.shape}, state has {state[name].shape}")
            p.data = np.array(state[name], dtype=np.float32)
        self._load_buffers(state)

    def _load_buffers(self, state: Mapping[str, np.ndarray], prefix: str = "") -> None:
        for name in getattr(self, "buffers", {}):
            self.buffers[name] = np.array(state[f"buffer/{prefix}{name}"], dtype=np.float32)
        for name, child in self.children():
            child._load_buffers(state, f"{prefix}{name}.")

    def _assign_names(self) -> None:
        for name, p in self.named_parameters():
            p.name = name


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_channels, in_channels, kernel_size, kernel_size)))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None
        self.padding = kernel_size // 2

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, padding=self.padding)


class Norm2d(Module):
    """Batch norm (running statistics in eval mode), instance norm, or identity"""

    def __init__(self, channels: int, kind: str = "batch", momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        if kind not in ("batch", "instance", "none"):
            raise ConfigError(f"Unknown normalisation kind: {kind}")
        self.kind = kind
        self.momentum = momentum
        self.eps = eps
        if kind != "none":
            self.weight = Parameter(np.ones(channels))
            self.bias = Parameter(np.zeros(channels))
        if kind == "batch":
            self.buffers = {
                "running_mean": np.zeros(channels, dtype=np.float32),
                "running_var": np.ones(channels, dtype=np.float32),
            }

    def forward(self, x: Tensor) -> Tensor:
        if self.kind == "none":
            return x
        if self.kind == "instance":
            x_hat, _, _ = normalize(x, axes=(2, 3), eps=self.eps)
            return affine_channels(x_hat, self.weight, self.bias)

        if self.training:
            x_hat, mean, var = normalize(x, axes=(0, 2, 3), eps=self.eps)
            count = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var.reshape(-1) * count / max(count - 1, 1)
            m = self.momentum
            self.buffers["running_mean"] = ((1 - m) * self.buffers["running_mean"] + m * mean.reshape(-1)).astype(np.float32)
            self.buffers["running_var"] = ((1 - m) * self.buffers["running_var"] + m * unbiased).astype(np.float32)
        else:
            mean = self.buffers["running_mean"].reshape(1, -1, 1, 1)
            inv_std = 1.0 / np.sqrt(self.buffers["running_var"].reshape(1, -1, 1, 1) + self.eps)
            x_hat = (x - mean) * inv_std
        return affine_channels(x_hat, self.weight, self.bias)


class ConvBlock(Module):
    """Two rounds of 3x3 conv -> ReLU -> norm"""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, norm: str = "batch"):
        super().__init__()
        self.conv1 = Conv2d(in_channels, out_channels, 3, rng)
        self.norm1 = Norm2d(out_channels, norm)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng)
        self.norm2 = Norm2d(out_channels, norm)

    def forward(self, x: Tensor) -> Tensor:
        x = self.norm1(relu(self.conv1(x)))
        return self.norm2(relu(self.conv2(x)))


@dataclass(frozen=True)
class FfcBlockConfig:
    channels: int
    local_ratio: float = 0.5

    @property
    def local_channels(self) -> int:
        return int(round(self.channels * self.local_ratio))

    @property
    def global_channels(self) -> int:
        return self.channels - self.local_channels

    def validate(self) -> None:
        if not 0.0 < self.local_ratio < 1.0:
            raise ConfigError(f"local_ratio must lie in (0, 1), got {self.local_ratio}")
        if self.local_channels < 1 or self.global_channels < 1:
            raise ConfigError(
                f"{self.channels} channels cannot be split with local_ratio {self.local_ratio} "
                f"(local {self.local_channels}, global {self.global_channels})"
            )


def spectral_conv(x: Tensor, weight: Tensor) -> Tensor:
    """rfft2 -> 1x1 conv over stacked (real, imag) channels -> irfft2"""
    channels, width = x.shape[1], x.shape[3]
    spectrum = rfft2(x)
    mixed = conv2d(concat([spectrum.real, spectrum.imag], axis=1), weight)
    return irfft2(
        ComplexSpectrum(take_channels(mixed, 0, channels), take_channels(mixed, channels, 2 * channels)),
        out_width=width,
    )


def ffc_forward(
    x,
    config: FfcBlockConfig,
    params: Mapping[str, Tensor],
    norm: Optional[Module] = None,
    activate: bool = True,
) -> Tensor:
    """Fast Fourier Convolution over a local/global channel split.

    params holds the bias-free kernels "l2l", "g2l", "l2g" (3x3) and
    "spectral" (1x1 acting on 2*global channels in the frequency domain).
    With activate=False the block is linear in x.
    """
    x = as_tensor(x)
    config.validate()
    if x.ndim != 4 or x.shape[1] != config.channels:
        raise ShapeError(f"ffc_forward expects {config.channels} channels, got shape {x.shape}")
    if x.shape[2] < 4 or x.shape[3] < 4:
        raise ShapeError(f"ffc_forward needs H, W >= 4, got shape {x.shape}")

    split = config.local_channels
    x_local = take_channels(x, 0, split)
    x_global = take_channels(x, split, config.channels)

    y_local = conv2d(x_local, params["l2l"], padding=1) + conv2d(x_global, params["g2l"], padding=1)
    y_global = conv2d(x_local, params["l2g"], padding=1) + spectral_conv(x_global, params["spectral"])
    out = concat([y_local, y_global], axis=1)

    if activate:
        out = relu(out)
        if norm is not None:
            out = norm(out)
    return out


class FfcBlock(Module):
    def __init__(self, config: FfcBlockConfig, rng: np.random.Generator, norm: str = "batch", activate: bool = True):
        super().__init__()
        config.validate()
        self.config = config
        self.activate = activate
        n_local, n_global = config.local_channels, config.global_channels

        def kernel(out_c, in_c, k):
            return Parameter(rng.normal(0.0, np.sqrt(2.0 / (in_c * k * k)), (out_c, in_c, k, k)))

        self.l2l = kernel(n_local, n_local, 3)
        self.g2l = kernel(n_local, n_global, 3)
        self.l2g = kernel(n_global, n_local, 3)
        self.spectral = kernel(2 * n_global, 2 * n_global, 1)
        self.norm = Norm2d(config.channels, norm)

    def forward(self, x: Tensor) -> Tensor:
        params = {"l2l": self.l2l, "g2l": self.g2l, "l2g": self.l2g, "spectral": self.spectral}
        return ffc_forward(x, self.config, params, norm=self.norm, activate=self.activate)


class SpectralStage(Module):
    """Channel projection followed by an FFC block"""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, norm: str, local_ratio: float):
        super().__init__()
        self.project = Conv2d(in_channels, out_channels, 3, rng)
        self.project_norm = Norm2d(out_channels, norm)
        self.ffc = FfcBlock(FfcBlockConfig(out_channels, local_ratio), rng, norm)

    def forward(self, x: Tensor) -> Tensor:
        return self.ffc(self.project_norm(relu(self.project(x))))


class BranchModel(Module):
    """Encoder-decoder producing 2-class logits at input resolution"""

    kind = ""

    def __init__(self, base_width: int, depth: int, norm: str = "batch", upsample: str = "bilinear", local_ratio: float = 0.5):
        super().__init__()
        if base_width < 1:
            raise ConfigError(f"base_width must be positive, got {base_width}")
        if depth < 2:
            raise ConfigError(f"depth must be at least 2, got {depth}")
        if upsample not in ("nearest", "bilinear"):
            raise ConfigError(f"Unknown upsampling mode: {upsample}")
        self.base_width = base_width
        self.depth = depth
        self.norm_kind = norm
        self.upsample = upsample
        self.local_ratio = local_ratio

    def header(self) -> Dict[str, Union[str, int, float]]:
        return {
            "kind": self.kind,
            "base_width": self.base_width,
            "depth": self.depth,
            "norm": self.norm_kind,
            "upsample": self.upsample,
            "local_ratio": self.local_ratio,
        }

    def widths(self) -> List[int]:
        return [self.base_width * 2 ** s for s in range(self.depth + 1)]

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"{self.kind} expects N x 3 x H x W input, got shape {x.shape}")
        factor = 2 ** self.depth
        for label, extent in (("height", x.shape[2]), ("width", x.shape[3])):
            if extent % factor:
                raise ShapeError(f"input {label} {extent} is not divisible by 2^depth = {factor}")

    def _up(self, x: Tensor) -> Tensor:
        return upsample_bilinear2x(x) if self.upsample == "bilinear" else upsample_nearest2x(x)

    def _decode(self, bottom: Tensor, skips: List[Tensor]) -> Tensor:
        x = bottom
        for block, skip in zip(self.decoder, reversed(skips)):
            x = block(concat([self._up(x), skip], axis=1))
        return self.head(x)


class UNet(BranchModel):
    kind = "unet"

    def __init__(self, base_width: int, depth: int, rng: np.random.Generator, **options):
        super().__init__(base_width, depth, **options)
        widths = self.widths()
        self.encoder = [ConvBlock(3 if s == 0 else widths[s - 1], widths[s], rng, self.norm_kind) for s in range(depth)]
        self.bottleneck = ConvBlock(widths[depth - 1], widths[depth], rng, self.norm_kind)
        self.decoder = [
            ConvBlock(widths[s + 1] + widths[s], widths[s], rng, self.norm_kind) for s in reversed(range(depth))
        ]
        self.head = Conv2d(widths[0], NUM_CLASSES, 1, rng)
        self._assign_names()

    def forward(self, x: Tensor) -> Tensor:
        self._check_input(x)
        skips = []
        for block in self.encoder:
            x = block(x)
            skips.append(x)
            x = max_pool2d(x)
        return self._decode(self.bottleneck(x), skips)


class YNet(BranchModel):
    """Spatial conv encoder plus FFC encoder, concatenated at every skip"""

    kind = "ynet"

    def __init__(self, base_width: int, depth: int, rng: np.random.Generator, **options):
        super().__init__(base_width, depth, **options)
        widths = self.widths()
        self.encoder = [ConvBlock(3 if s == 0 else widths[s - 1], widths[s], rng, self.norm_kind) for s in range(depth)]
        self.spectral_encoder = [
            SpectralStage(3 if s == 0 else widths[s - 1], widths[s], rng, self.norm_kind, self.local_ratio)
            for s in range(depth)
        ]
        self.bottleneck = ConvBlock(2 * widths[depth - 1], widths[depth], rng, self.norm_kind)
        self.decoder = [
            ConvBlock(widths[s + 1] + 2 * widths[s], widths[s], rng, self.norm_kind) for s in reversed(range(depth))
        ]
        self.head = Conv2d(widths[0], NUM_CLASSES, 1, rng)
        self._assign_names()

    def forward(self, x: Tensor) -> Tensor:
        self._check_input(x)
        spatial, spectral, skips = x, x, []
        for conv_stage, ffc_stage in zip(self.encoder, self.spectral_encoder):
            spatial = conv_stage(spatial)
            spectral = ffc_stage(spectral)
            skips.append(concat([spatial, spectral], axis=1))
            spatial, spectral = max_pool2d(spatial), max_pool2d(spectral)
        return self._decode(self.bottleneck(concat([spatial, spectral], axis=1)), skips)


def build_unet(base_width: int = 16, depth: int = 3, seed: int = 0, **options) -> UNet:
    return UNet(base_width, depth, np.random.default_rng(seed), **options)


def build_ynet(base_width: int = 16, depth: int = 3, seed: int = 0, **options) -> YNet:
    return YNet(base_width, depth, np.random.default_rng(seed), **options)


def build_model(kind: str, base_width: int = 16, depth: int = 3, seed: int = 0, **options) -> BranchModel:
    builders = {"unet": build_unet, "ynet": build_ynet}
    if kind not in builders:
        raise ConfigError(f"Unknown model kind: {kind} (expected one of {MODEL_KINDS})")
    model = builders[kind](base_width, depth, seed, **options)
    logger.info(f"Built {kind} (base_width={base_width}, depth={depth}) with {model.parameter_count()} parameters")
    return model


def save_branch(path: Union[str, Path], model: BranchModel) -> None:
    """Write parameters/buffers as S2TF plus a JSON header sidecar"""
    from .data.tensorfile import tensor_file_write
    from .utils import write_json

    path = Path(path)
    tensor_file_write(path, model.state_dict())
    write_json(path.with_suffix(".json"), model.header())


def load_branch(path: Union[str, Path], expected_kind: Optional[str] = None) -> BranchModel:
    from .data.tensorfile import tensor_file_read
    from .utils import read_json

    path = Path(path)
    header = read_json(path.with_suffix(".json"))
    if expected_kind is not None and header["kind"] != expected_kind:
        raise ConfigError(f"{path} holds a {header['kind']} model, expected {expected_kind}")
    options = {k: header[k] for k in ("norm", "upsample", "local_ratio")}
    model = build_model(header["kind"], header["base_width"], header["depth"], seed=0, **options)
    model.load_state_dict(tensor_file_read(path))
    return model
