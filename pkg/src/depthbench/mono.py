"""Monocular depth autoencoder, its training losses, and SSIM."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import ops
from .nn import BlockSpec, Conv, ConvBlock, Module, ParamStore, init_parameters
from .tensor import Tensor, as_tensor, no_grad

DEFAULT_LADDERS = {
    "4-1-4": (16, 32, 64, 128, 256),
    "3-1-3": (16, 32, 64, 128),
}


@dataclass
class MonoModelConfig:
    depth_structure: str = "4-1-4"
    filter_ladder: Optional[Tuple[int, ...]] = None  # encoder widths + bottleneck width
    activation: str = "leaky_relu"
    leaky_alpha: float = 0.2
    use_skip_connections: bool = True
    head_kernel: int = 1
    input_size: int = 256

    def __post_init__(self):
        if self.depth_structure not in DEFAULT_LADDERS:
            raise ValueError(f"unknown depth structure {self.depth_structure!r}")
        if self.activation not in ("leaky_relu", "swish"):
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.filter_ladder is None:
            self.filter_ladder = DEFAULT_LADDERS[self.depth_structure]
        self.filter_ladder = tuple(int(f) for f in self.filter_ladder)
        n_down = int(self.depth_structure.split("-")[0])
        if len(self.filter_ladder) != n_down + 1:
            raise ValueError(f"ladder {self.filter_ladder} does not fit structure {self.depth_structure}")
        if any(b <= a for a, b in zip(self.filter_ladder, self.filter_ladder[1:])):
            raise ValueError("filter ladder must be strictly increasing")

    @property
    def n_down(self) -> int:
        return len(self.filter_ladder) - 1


@dataclass
class MonoSample:
    """RGB (3xHxW), normalized depth (1xHxW) and validity mask (1xHxW).

    Batched samples carry a leading N axis on every field.
    """

    rgb: np.ndarray
    depth: np.ndarray
    mask: np.ndarray


@dataclass
class LossWeights:
    w_ssim: float = 0.85
    w_l1: float = 0.1
    w_smooth: float = 0.9

    def __post_init__(self):
        if min(self.w_ssim, self.w_l1, self.w_smooth) < 0:
            raise ValueError("loss weights must be non-negative")


class MonoDepthNet(Module):
    """Encoder / bottleneck / decoder with a 1-channel sigmoid head."""

    task = "mono"

    def __init__(self, config: MonoModelConfig, seed: int = 0):
        self.config = config
        self.store = ParamStore()
        act, a = config.activation, config.leaky_alpha
        ladder = config.filter_ladder
        cin = 3
        self.down: List[ConvBlock] = []
        for i, f in enumerate(ladder[:-1]):
            self.down.append(ConvBlock(self.store, f"down{i}", BlockSpec("downscale", cin, f, act), a))
            cin = f
        self.bottleneck = ConvBlock(
            self.store, "bottleneck", BlockSpec("bottleneck", ladder[-2], ladder[-1], act, has_batchnorm=False), a
        )
        cin = ladder[-1]
        self.up: List[ConvBlock] = []
        for i, f in enumerate(reversed(ladder[:-1])):
            spec = BlockSpec("upscale", cin, f, act, has_skip_concat=config.use_skip_connections,
                             skip_channels=f if config.use_skip_connections else 0)
            self.up.append(ConvBlock(self.store, f"up{i}", spec, a))
            cin = f
        self.head = Conv(self.store, "head", ladder[0], 1, k=config.head_kernel)
        init_parameters(self.store, seed)

    def forward(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        size = x.shape[-1]
        if size % (2 ** self.config.n_down) or x.shape[-2] % (2 ** self.config.n_down):
            raise ValueError(f"input {x.shape[-2:]} not divisible by 2^{self.config.n_down}")
        skips = []
        for block in self.down:
            s, x = block.encode(x)
            skips.append(s)
        x = self.bottleneck(x)
        for block, s in zip(self.up, reversed(skips)):
            x = block(x, s if self.config.use_skip_connections else None)
        return ops.sigmoid(self.head(x))


def build_mono_model(config: MonoModelConfig, seed: int = 0) -> MonoDepthNet:
    if config.input_size % (2 ** config.n_down):
        raise ValueError(f"input size {config.input_size} not divisible by 2^{config.n_down}")
    return MonoDepthNet(config, seed)


def predict_depth(model: MonoDepthNet, image: np.ndarray) -> np.ndarray:
    """Eval-mode depth prediction; accepts 3xHxW or Nx3xHxW, returns 1xHxW or Nx1xHxW."""
    img = np.asarray(image, dtype=np.float64)
    single = img.ndim == 3
    if single:
        img = img[None]
    size = model.config.input_size
    if img.shape[1] != 3 or img.shape[2:] != (size, size):
        raise ValueError(f"expected 3x{size}x{size} input, got {img.shape[1:]}")
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            out = model(Tensor(img)).data
    finally:
        model.train(was_training)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# losses and metrics
# ---------------------------------------------------------------------------


def l1_depth_loss(pred: Tensor, target, mask) -> Tensor:
    return ops.masked_mean(ops.abs(ops.sub(target, pred)), mask)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter(x: Tensor, window: Tensor) -> Tensor:
    n, c, h, w = x.shape
    y = ops.conv2d(ops.reshape(x, (n * c, 1, h, w)), window)
    return ops.reshape(y, (n, c) + y.shape[2:])


def ssim_maps(x, y, max_val: float = 1.0, window_size: int = 11, sigma: float = 1.5):
    """Per-window luminance and contrast-structure maps (valid windows only)."""
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    while x.ndim < 4:
        x, y = ops.reshape(x, (1,) + x.shape), ops.reshape(y, (1,) + y.shape)
    if x.shape[-1] < window_size or x.shape[-2] < window_size:
        raise ValueError(f"{window_size}x{window_size} window larger than image {x.shape[-2:]}")
    win = Tensor(gaussian_window(window_size, sigma)[None, None])
    c1 = (0.01 * max_val) ** 2
    c2 = (0.03 * max_val) ** 2
    mu_x, mu_y = _filter(x, win), _filter(y, win)
    mu_xx, mu_yy, mu_xy = ops.square(mu_x), ops.square(mu_y), mu_x * mu_y
    var_x = _filter(ops.square(x), win) - mu_xx
    var_y = _filter(ops.square(y), win) - mu_yy
    cov = _filter(x * y, win) - mu_xy
    lum = (2.0 * mu_xy + c1) / (mu_xx + mu_yy + c1)
    cs = (2.0 * cov + c2) / (var_x + var_y + c2)
    return lum, cs


def ssim(x, y, max_val: float = 1.0) -> Tensor:
    """Mean SSIM over 11x11 Gaussian (sigma 1.5) windows, k1=0.01, k2=0.03."""
    lum, cs = ssim_maps(x, y, max_val)
    return ops.mean(lum * cs)


def ssim_per_sample(x: np.ndarray, y: np.ndarray, max_val: float = 1.0) -> np.ndarray:
    with no_grad():
        lum, cs = ssim_maps(x, y, max_val)
        m = (lum * cs).data
    return m.reshape(m.shape[0], -1).mean(axis=1)


def depth_smoothness_loss(depth: Tensor, image) -> Tensor:
    """Edge-aware smoothness: |grad d| * exp(-|grad I|), x and y terms averaged separately."""
    depth = as_tensor(depth)
    img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if depth.shape[-2:] != img.shape[-2:]:
        raise ValueError("depth and image spatial shapes differ")
    wx = np.exp(-np.abs(np.diff(img, axis=-1)).mean(axis=-3, keepdims=True))
    wy = np.exp(-np.abs(np.diff(img, axis=-2)).mean(axis=-3, keepdims=True))
    dx = depth[..., :, 1:] - depth[..., :, :-1]
    dy = depth[..., 1:, :] - depth[..., :-1, :]
    return ops.mean(ops.abs(dx) * wx) + ops.mean(ops.abs(dy) * wy)


def mono_total_loss(pred: Tensor, sample: MonoSample, weights: Optional[LossWeights] = None) -> Tensor:
    """w_ssim * (1 - SSIM) / 2 + w_l1 * L1 + w_smooth * smoothness."""
    weights = weights or LossWeights()
    total = Tensor(np.zeros(()))
    if weights.w_ssim:
        total = total + (1.0 - ssim(pred, sample.depth)) * (0.5 * weights.w_ssim)
    if weights.w_l1:
        total = total + l1_depth_loss(pred, sample.depth, sample.mask) * weights.w_l1
    if weights.w_smooth:
        total = total + depth_smoothness_loss(pred, sample.rgb) * weights.w_smooth
    return total
