"""
Small convolutional pixel-embedding network with manual backprop, and SGD.

Architecture: 3x3 conv + ReLU blocks with "same" zero padding, then a 1x1
conv to the embedding dimension. Images are H x W x C float arrays; the
output is one dim-vector per pixel.
"""

import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Import sibling modules
sys.path.insert(0, str(Path(__file__).parent))
from errors import ConfigError, MissingForwardCache, NonFiniteUpdate, ShapeMismatch
from losses import LossWeights
from tam_core import VisualEmbeddingMap

HEAD = "head"


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 3
    hidden_channels: Tuple[int, ...] = (16, 32)
    dim: int = 16
    kernel_size: int = 3

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.dim < 1 or self.in_channels < 1 or any(c < 1 for c in self.hidden_channels):
            raise ConfigError("channel counts must be positive")

    @property
    def channels(self) -> List[int]:
        return [self.in_channels, *self.hidden_channels, self.dim]

    def layer_names(self) -> List[str]:
        return [f"conv{i + 1}" for i in range(len(self.hidden_channels))] + [HEAD]

    def kernel_for(self, name: str) -> int:
        return 1 if name == HEAD else self.kernel_size


def conv_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Stride-1 "same" convolution of an H x W x Cin array.

    weight is k x k x Cin x Cout. Returns the H x W x Cout output and the
    unfolded input columns (P x k*k*Cin) needed by conv_backward.
    """
    k = weight.shape[0]
    pad = k // 2
    H, W, C = x.shape
    padded = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    # windows[i, j, c, ky, kx] = padded[i + ky, j + kx, c]
    windows = sliding_window_view(padded, (k, k), axis=(0, 1))
    cols = windows.transpose(0, 1, 3, 4, 2).reshape(H * W, k * k * C)
    out = cols @ weight.reshape(k * k * C, -1) + bias
    return out.reshape(H, W, -1), cols


def conv_backward(
    grad_out: np.ndarray, cols: np.ndarray, weight: np.ndarray, input_shape: Tuple[int, int, int], need_input: bool = True
) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """Gradients wrt weight, bias and (optionally) the input of conv_forward."""
    k = weight.shape[0]
    pad = k // 2
    H, W, C = input_shape
    g = grad_out.reshape(H * W, -1)
    grad_w = (cols.T @ g).reshape(weight.shape)
    grad_b = g.sum(axis=0)
    if not need_input:
        return grad_w, grad_b, None

    grad_cols = (g @ weight.reshape(k * k * C, -1).T).reshape(H, W, k, k, C)
    grad_padded = np.zeros((H + 2 * pad, W + 2 * pad, C))
    for ky in range(k):
        for kx in range(k):
            grad_padded[ky:ky + H, kx:kx + W] += grad_cols[:, :, ky, kx, :]
    return grad_w, grad_b, grad_padded[pad:pad + H, pad:pad + W]


def init_encoder_params(config: EncoderConfig, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """Weights and biases uniform in +-1/sqrt(fan_in).

    An untrained encoder therefore maps the black background to a nonzero
    constant embedding rather than the zero vector.
    """
    params = {}
    channels = config.channels
    for i, name in enumerate(config.layer_names()):
        k = config.kernel_for(name)
        c_in, c_out = channels[i], channels[i + 1]
        limit = 1.0 / np.sqrt(k * k * c_in)
        params[f"{name}.weight"] = rng.uniform(-limit, limit, size=(k, k, c_in, c_out))
        params[f"{name}.bias"] = rng.uniform(-limit, limit, size=c_out)
    return params


@dataclass
class EncoderCache:
    image_shape: Tuple[int, int, int]
    # per layer: (input shape, unfolded columns, pre-activation)
    layers: List[Tuple[Tuple[int, int, int], np.ndarray, np.ndarray]] = field(default_factory=list)


class PixelEncoder:
    """Maps an H x W x 3 image in [0, 1] to a VisualEmbeddingMap."""

    def __init__(self, config: EncoderConfig, params: Optional[Dict[str, np.ndarray]] = None, seed: int = 0):
        self.config = config
        if params is None:
            params = init_encoder_params(config, np.random.default_rng(seed))
        self._check_params(params)
        self.params = params
        self._cache: Optional[EncoderCache] = None

    def _check_params(self, params: Dict[str, np.ndarray]) -> None:
        channels = self.config.channels
        for i, name in enumerate(self.config.layer_names()):
            k = self.config.kernel_for(name)
            expected = {
                f"{name}.weight": (k, k, channels[i], channels[i + 1]),
                f"{name}.bias": (channels[i + 1],),
            }
            for key, shape in expected.items():
                if key not in params:
                    raise ShapeMismatch(f"missing encoder parameter {key}")
                if params[key].shape != shape:
                    raise ShapeMismatch(f"{key} has shape {params[key].shape}, expected {shape}")

    @property
    def dim(self) -> int:
        return self.config.dim

    def forward_with_cache(self, image: np.ndarray) -> Tuple[VisualEmbeddingMap, EncoderCache]:
        if image.ndim != 3 or image.shape[2] != self.config.in_channels:
            raise ShapeMismatch(
                f"expected H x W x {self.config.in_channels} image, got shape {image.shape}"
            )
        cache = EncoderCache(image_shape=image.shape)
        x = np.asarray(image, dtype=np.float64)
        names = self.config.layer_names()
        for name in names:
            pre, cols = conv_forward(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])
            cache.layers.append((x.shape, cols, pre))
            x = pre if name == HEAD else np.maximum(pre, 0.0)
        self._cache = cache
        return VisualEmbeddingMap.from_grid(x), cache

    def forward(self, image: np.ndarray) -> VisualEmbeddingMap:
        return self.forward_with_cache(image)[0]

    def backward(self, grad_E: np.ndarray, cache: Optional[EncoderCache] = None) -> Dict[str, np.ndarray]:
        """Parameter gradients given dL/dE_vis (P x dim) for the cached forward pass."""
        cache = cache if cache is not None else self._cache
        if cache is None:
            raise MissingForwardCache("backward called before forward")
        H, W, _ = cache.image_shape
        if grad_E.shape != (H * W, self.dim):
            raise ShapeMismatch(f"gradient shape {grad_E.shape}, expected {(H * W, self.dim)}")

        grads: Dict[str, np.ndarray] = {}
        names = self.config.layer_names()
        g = grad_E.reshape(H, W, self.dim)
        for index in range(len(names) - 1, -1, -1):
            name = names[index]
            input_shape, cols, pre = cache.layers[index]
            if name != HEAD:
                g = g * (pre > 0)
            grad_w, grad_b, g = conv_backward(
                g, cols, self.params[f"{name}.weight"], input_shape, need_input=index > 0
            )
            grads[f"{name}.weight"] = grad_w
            grads[f"{name}.bias"] = grad_b
        return grads


@dataclass(frozen=True)
class AugmentationPolicy:
    scale_min: float = 1.0
    scale_max: float = 1.25
    # 0 crops back to the input size
    crop_size: int = 0
    mirror_prob: float = 0.5

    def __post_init__(self):
        if not 0 < self.scale_min <= self.scale_max:
            raise ConfigError(f"need 0 < scale_min <= scale_max, got {self.scale_min}, {self.scale_max}")
        if self.crop_size < 0:
            raise ConfigError(f"crop_size must be >= 0, got {self.crop_size}")
        if not 0.0 <= self.mirror_prob <= 1.0:
            raise ConfigError(f"mirror_prob must be in [0, 1], got {self.mirror_prob}")

    def crop_for(self, image_size: int) -> int:
        crop = self.crop_size or image_size
        if crop > int(round(image_size * self.scale_min)):
            raise ConfigError(f"crop_size {crop} exceeds the smallest scaled image size")
        return crop


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_size: int = 4
    lr_weights: float = 0.05
    lr_biases: float = 0.1
    weight_decay: float = 0.0005
    poly_power: float = 0.9
    head_lr_mult: float = 10.0
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_weights <= 0 or self.lr_biases <= 0:
            raise ConfigError("learning rates must be positive")
        if self.weight_decay < 0 or self.poly_power < 0 or self.head_lr_mult <= 0:
            raise ConfigError("weight_decay and poly_power must be >= 0, head_lr_mult > 0")


def poly_lr(base_lr: float, step: int, total_steps: int, power: float = 0.9) -> float:
    """base_lr * (1 - step/total_steps)^power, reaching 0 at the last step."""
    if total_steps <= 0:
        return 0.0
    remaining = max(0.0, 1.0 - step / total_steps)
    return base_lr * remaining ** power


def param_lr(name: str, step: int, total_steps: int, config: TrainConfig) -> float:
    """Bias parameters use lr_biases; the embedding head and M_txt get head_lr_mult."""
    base = config.lr_biases if name.endswith(".bias") else config.lr_weights
    if name.startswith(f"{HEAD}.") or name == "M_txt":
        base *= config.head_lr_mult
    return poly_lr(base, step, total_steps, config.poly_power)


def sgd_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    step_index: int,
    config: TrainConfig,
    total_steps: int,
) -> Dict[str, np.ndarray]:
    """p <- p - lr(step) * (g + weight_decay * p) for every parameter with a gradient."""
    updated = dict(params)
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NonFiniteUpdate(f"non-finite gradient for {name} at step {step_index}")
        lr = param_lr(name, step_index, total_steps, config)
        new_value = params[name] - lr * (grad + config.weight_decay * params[name])
        if not np.all(np.isfinite(new_value)):
            raise NonFiniteUpdate(f"non-finite value for {name} after step {step_index}")
        updated[name] = new_value
    return updated
