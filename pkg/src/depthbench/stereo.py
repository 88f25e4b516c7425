"""Anytime stereo network: U-Net features, cost volumes, soft-argmin, SPN refinement."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import ops
from .nn import BatchNorm, Conv, Module, ParamStore, init_parameters
from .tensor import DTYPE, Tensor, as_tensor

SPN_SWEEP = (None, 1, 2, 4, 8)
SCALES = (16, 8, 4)


@dataclass
class AnyNetConfig:
    max_disparity: int = 192
    residual_range: int = 2
    spn_channels: Optional[int] = 8
    stage_loss_weights: Tuple[float, ...] = (0.25, 0.5, 1.0, 1.0)
    unet_base_channels: int = 1
    unet_blocks: int = 2
    disparity_net_channels: int = 4
    disparity_net_layers: int = 4
    growth_rate: Tuple[int, int, int] = (4, 1, 1)
    smooth_l1_beta: float = 1.0

    def __post_init__(self):
        if self.max_disparity <= 0 or self.max_disparity % 16:
            raise ValueError(f"max_disparity must be a positive multiple of 16, got {self.max_disparity}")
        if self.spn_channels not in SPN_SWEEP:
            raise ValueError(f"spn_channels must be one of {SPN_SWEEP}, got {self.spn_channels!r}")
        if self.residual_range < 1:
            raise ValueError("residual_range must be >= 1")
        if len(self.stage_loss_weights) != 4:
            raise ValueError("stage_loss_weights needs 4 entries")
        self.stage_loss_weights = tuple(float(w) for w in self.stage_loss_weights)
        self.growth_rate = tuple(int(g) for g in self.growth_rate)
        if min(self.unet_base_channels, self.unet_blocks, self.disparity_net_channels) < 1:
            raise ValueError("channel/block counts must be positive")


@dataclass
class StereoSample:
    """Rectified pair (3xHxW each), left disparity in pixels (1xHxW), validity mask.

    Batched samples carry a leading N axis on every field.
    """

    left: np.ndarray
    right: np.ndarray
    disparity: np.ndarray
    mask: np.ndarray


@dataclass
class CostVolume:
    """Costs over candidate index i, each standing for disparity ``base + step * i``."""

    cost: Tensor  # N x D x H x W
    base: Union[float, Tensor] = 0.0  # scalar or N x 1 x H x W
    step: float = 1.0

    @property
    def depth(self) -> int:
        return self.cost.shape[1]


# ---------------------------------------------------------------------------
# matching costs
# ---------------------------------------------------------------------------


def _shift_cost(fl: Tensor, fr: Tensor, shifts: Sequence[int]) -> Tensor:
    """cost[s, y, x] = mean_c |fl[c, y, x] - fr[c, y, x - s]| with out-of-range
    candidates replaced by the largest in-range cost at (y, x)."""
    if fl.shape != fr.shape:
        raise ValueError(f"feature shapes differ: {fl.shape} vs {fr.shape}")
    n, c, h, w = fl.shape
    ns = len(shifts)
    cost = np.zeros((n, ns, h, w), dtype=DTYPE)
    valid = np.zeros((ns, w), dtype=bool)
    signs = []
    for j, s in enumerate(shifts):
        lo, hi = max(s, 0), min(w, w + s)
        if lo >= hi:
            signs.append(None)
            continue
        valid[j, lo:hi] = True
        diff = fl.data[..., lo:hi] - fr.data[..., lo - s:hi - s]
        cost[:, j, :, lo:hi] = np.abs(diff).mean(axis=1)
        signs.append(np.sign(diff))
        ops.note_branch(signs[-1])
    vmask = np.broadcast_to(valid[None, :, None, :], cost.shape)
    masked = np.where(vmask, cost, -np.inf)
    best = masked.argmax(axis=1)
    ops.note_branch(best)
    fill = np.take_along_axis(cost, best[:, None], axis=1)
    cost = np.where(vmask, cost, fill)

    def bw(g):
        g_eff = np.where(vmask, g, 0.0)
        routed = np.where(vmask, 0.0, g).sum(axis=1, keepdims=True)
        np.put_along_axis(g_eff, best[:, None], np.take_along_axis(g_eff, best[:, None], axis=1) + routed, axis=1)
        gl = np.zeros_like(fl.data)
        gr = np.zeros_like(fr.data)
        for j, s in enumerate(shifts):
            if signs[j] is None:
                continue
            lo, hi = max(s, 0), min(w, w + s)
            t = signs[j] * (g_eff[:, j:j + 1, :, lo:hi] / c)
            gl[..., lo:hi] += t
            gr[..., lo - s:hi - s] -= t
        return gl, gr

    return Tensor._from_op(cost, (fl, fr), bw)


def cost_volume_full(fl: Tensor, fr: Tensor, d: int) -> CostVolume:
    """Costs for integer disparities 0..d-1 at the features' own scale."""
    if d > fl.shape[-1]:
        raise ValueError(f"{d} candidates exceed feature width {fl.shape[-1]}")
    return CostVolume(_shift_cost(fl, fr, list(range(d))), 0.0, 1.0)


def cost_volume_residual(fl: Tensor, fr_warped: Tensor, k: int, base=0.0) -> CostVolume:
    """Costs for offsets -k..k on top of an already warped right view.

    ``base`` is the disparity the warp applied; candidate i maps to base - k + i.
    """
    cv = _shift_cost(fl, fr_warped, list(range(-k, k + 1)))
    b = base - float(k) if not isinstance(base, Tensor) else ops.sub(base, float(k))
    return CostVolume(cv, b, 1.0)


def warp_with_disparity(fr: Tensor, disparity: Tensor) -> Tensor:
    """Sample ``fr`` at (y, x - d(y, x)) with linear interpolation along x, edge-clamped."""
    fr, disparity = as_tensor(fr), as_tensor(disparity)
    n, c, h, w = fr.shape
    if disparity.shape != (n, 1, h, w):
        raise ValueError(f"disparity shape {disparity.shape} does not match features {fr.shape}")
    xs = np.arange(w, dtype=DTYPE)[None, None, None, :] - disparity.data
    inside = (xs > 0) & (xs < w - 1)
    xc = np.clip(xs, 0, w - 1)
    x0 = np.minimum(np.floor(xc).astype(np.int64), w - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    ops.note_branch(x0, inside)
    a = xc - x0
    i0 = np.broadcast_to(x0, (n, c, h, w))
    i1 = np.broadcast_to(x1, (n, c, h, w))
    v0 = np.take_along_axis(fr.data, i0, axis=-1)
    v1 = np.take_along_axis(fr.data, i1, axis=-1)
    out = (1.0 - a) * v0 + a * v1

    def bw(g):
        gf = gd = None
        if fr.requires_grad:
            gf = np.zeros_like(fr.data)
            flat = gf.reshape(n * c * h, w)
            rows = np.repeat(np.arange(n * c * h), w)
            np.add.at(flat, (rows, i0.reshape(-1)), (g * (1.0 - a)).reshape(-1))
            np.add.at(flat, (rows, i1.reshape(-1)), (g * a).reshape(-1))
        if disparity.requires_grad:
            # d out / d xs = v1 - v0 inside, zero where clamped; xs = x - d
            gd = -(g * (v1 - v0) * inside).sum(axis=1, keepdims=True)
        return gf, gd

    return Tensor._from_op(out, (fr, disparity), bw)


def soft_argmin(cv: CostVolume) -> Tensor:
    """Softmax(-cost)-weighted mean of the candidate disparities."""
    p = ops.softmax(ops.neg(cv.cost), axis=1)
    idx = np.arange(cv.depth, dtype=DTYPE).reshape(1, -1, 1, 1) * cv.step
    d = ops.sum(p * idx, axis=1, keepdims=True)
    return ops.add(d, cv.base)


# ---------------------------------------------------------------------------
# spatial propagation
# ---------------------------------------------------------------------------

_DIRECTIONS = ("lr", "rl", "tb", "bt")


def _to_canonical(a: np.ndarray, direction: str) -> np.ndarray:
    if direction in ("tb", "bt"):
        a = np.swapaxes(a, -1, -2)
    if direction in ("rl", "bt"):
        a = a[..., ::-1]
    return np.ascontiguousarray(a)


def _from_canonical(a: np.ndarray, direction: str) -> np.ndarray:
    if direction in ("rl", "bt"):
        a = a[..., ::-1]
    if direction in ("tb", "bt"):
        a = np.swapaxes(a, -1, -2)
    return np.ascontiguousarray(a)


def _neighbours(prev: np.ndarray) -> np.ndarray:
    """(..., Y) -> (..., 3, Y): values at rows y-1, y, y+1 (edges filled later by masking)."""
    nb = np.empty(prev.shape[:-1] + (3,) + prev.shape[-1:], dtype=DTYPE)
    nb[..., 0, 1:] = prev[..., :-1]
    nb[..., 0, 0] = 0.0
    nb[..., 1, :] = prev
    nb[..., 2, :-1] = prev[..., 1:]
    nb[..., 2, -1] = 0.0
    return nb


def spn_scan(disparity: Tensor, weights: Tensor, direction: str) -> Tensor:
    """One directional linear propagation pass.

    ``disparity`` is N x 1 x H x W, ``weights`` N x G x 3 x H x W with
    non-negative entries summing to at most 1 per pixel. Each of the G groups
    yields h(p) = (1 - sum_i w_i) d(p) + sum_i w_i h(q_i), where q_i are the
    three previous-column neighbours along the scan; missing neighbours drop
    out of both sums. Returns N x G x H x W.
    """
    if direction not in _DIRECTIONS:
        raise ValueError(f"unknown scan direction {direction!r}")
    d = _to_canonical(disparity.data, direction)  # N,1,Y,X
    wt = _to_canonical(weights.data, direction)  # N,G,3,Y,X
    n, g, _, ny, nx = wt.shape
    valid = np.ones((3, ny), dtype=DTYPE)
    valid[0, 0] = 0.0
    valid[2, -1] = 0.0
    wv = wt * valid[None, None, :, :, None]
    h = np.empty((n, g, ny, nx), dtype=DTYPE)
    h[..., 0] = d[..., 0]
    for x in range(1, nx):
        wx = wv[..., x]
        nb = _neighbours(h[..., x - 1])
        h[..., x] = (1.0 - wx.sum(axis=2)) * d[..., x] + (wx * nb).sum(axis=2)
    out = _from_canonical(h, direction)

    def bw(gout):
        gh = _to_canonical(gout, direction).copy()
        gd = np.zeros((n, g, ny, nx), dtype=DTYPE)
        gw = np.zeros_like(wt)
        for x in range(nx - 1, 0, -1):
            gx = gh[..., x]  # N,G,Y
            wx = wv[..., x]
            gd[..., x] += gx * (1.0 - wx.sum(axis=2))
            nb = _neighbours(h[..., x - 1])
            gw[..., x] = gx[:, :, None] * (nb - d[:, :, None, :, x]) * valid
            t = gx[:, :, None] * wx
            gh[..., :-1, x - 1] += t[:, :, 0, 1:]  # row y reads row y-1
            gh[..., x - 1] += t[:, :, 1]
            gh[..., 1:, x - 1] += t[:, :, 2, :-1]  # row y reads row y+1
        gd[..., 0] += gh[..., 0]
        gdisp = _from_canonical(gd.sum(axis=1, keepdims=True), direction)
        return gdisp, _from_canonical(gw, direction)

    return Tensor._from_op(out, (disparity, weights), bw)


def spn_propagate(disparity: Tensor, affinity: Tensor) -> Tensor:
    """Refine N x 1 x H x W ``disparity`` with N x 3G x H x W raw affinities.

    Raw values g become weights |g| / (1 + sum|g|) so each pixel is a convex
    combination of its own value and already propagated neighbours. All G
    groups run the four scan directions; the result is their average.
    """
    n, c3, h, w = affinity.shape
    if c3 % 3:
        raise ValueError("affinity channel count must be a multiple of 3")
    a = ops.abs(ops.reshape(affinity, (n, c3 // 3, 3, h, w)))
    wts = a / (ops.sum(a, axis=2, keepdims=True) + 1.0)
    total = None
    for direction in _DIRECTIONS:
        hdir = spn_scan(disparity, wts, direction)
        total = hdir if total is None else total + hdir
    return ops.mean(total, axis=1, keepdims=True) * 0.25


class SPNRefiner(Module):
    """Guidance CNN (image + normalized disparity -> 3*channels affinities) and propagation."""

    def __init__(self, store: ParamStore, channels: int, name: str = "spn"):
        if channels not in (1, 2, 4, 8):
            raise ValueError(f"SPN channels must be 1, 2, 4 or 8, got {channels}")
        c2 = 2 * channels
        self.channels = channels
        self.convs = [
            Conv(store, f"{name}.conv0", 4, c2, bias=False),
            Conv(store, f"{name}.conv1", c2, c2, bias=False),
            Conv(store, f"{name}.conv2", c2, c2, bias=False),
            Conv(store, f"{name}.conv3", c2, 3 * channels, bias=False),
        ]

    def affinity(self, disparity: Tensor, guidance_rgb: Tensor, disp_scale: float) -> Tensor:
        x = ops.concat([as_tensor(guidance_rgb), disparity * (1.0 / disp_scale)], axis=1)
        for conv in self.convs[:-1]:
            x = ops.relu(conv(x))
        return self.convs[-1](x)

    def forward(self, disparity: Tensor, guidance_rgb: Tensor, disp_scale: float = 1.0) -> Tensor:
        return spn_propagate(disparity, self.affinity(disparity, guidance_rgb, disp_scale))


def spn_refine(disparity: Tensor, guidance_rgb: Tensor, channels: int, seed: int = 0,
               refiner: Optional[SPNRefiner] = None) -> Tensor:
    """Stand-alone refinement with a (fresh, seeded) guidance network of ``channels`` width."""
    if refiner is None:
        store = ParamStore()
        refiner = SPNRefiner(store, channels)
        init_parameters(store, seed)
    return refiner(as_tensor(disparity), guidance_rgb)


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


class PreActConv(Module):
    """BN -> ReLU -> bias-free conv (2-D or 3-D)."""

    def __init__(self, store: ParamStore, name: str, cin: int, cout: int, stride: int = 1, nd: int = 2):
        self.bn = BatchNorm(store, f"{name}.bn", cin)
        self.conv = Conv(store, f"{name}.conv", cin, cout, stride=stride, bias=False, nd=nd)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(ops.relu(self.bn(x)))


class FeatureUNet(Module):
    """Features at 1/16, 1/8 and 1/4 resolution (coarse first)."""

    def __init__(self, store: ParamStore, base: int = 1, nblock: int = 2):
        self.stem = Conv(store, "fe.stem", 3, base)
        self.stem_down = PreActConv(store, "fe.stem_down", base, base, stride=2)
        widths = [base, 2 * base, 4 * base, 8 * base]
        self.down = []
        for lvl in range(3):
            convs, cin = [], widths[lvl]
            for b in range(nblock):
                convs.append(PreActConv(store, f"fe.down{lvl}.{b}", cin, widths[lvl + 1]))
                cin = widths[lvl + 1]
            self.down.append(convs)
        self.up = []
        for lvl, (skip_c, coarse_c) in enumerate([(widths[2], widths[3]), (widths[1], widths[2])]):
            convs, cin = [], skip_c + coarse_c
            for b in range(nblock):
                convs.append(PreActConv(store, f"fe.up{lvl}.{b}", cin, skip_c))
                cin = skip_c
            self.up.append(convs)
        self.out_channels = (widths[3], widths[2], widths[1])

    def children(self):
        yield self.stem
        yield self.stem_down
        for convs in self.down + self.up:
            yield from convs

    def forward(self, x: Tensor) -> List[Tensor]:
        x = self.stem_down(self.stem(x))
        feats = []
        for convs in self.down:
            x = ops.maxpool2x2(x)
            for conv in convs:
                x = conv(x)
            feats.append(x)
        f4, f8, f16 = feats
        out = [f16]
        coarse = f16
        for convs, skip in zip(self.up, (f8, f4)):
            x = ops.concat([skip, ops.pool_and_resample(coarse, "upsample_bilinear2x")], axis=1)
            for conv in convs:
                x = conv(x)
            out.append(x)
            coarse = x
        return out


class DisparityNet(Module):
    """3-D convolutions over the 1-channel cost volume (N x 1 x D x H x W)."""

    def __init__(self, store: ParamStore, name: str, channels: int, layers: int):
        self.layers = [PreActConv(store, f"{name}.0", 1, channels, nd=3)]
        self.layers += [PreActConv(store, f"{name}.{i + 1}", channels, channels, nd=3) for i in range(layers)]
        self.layers.append(PreActConv(store, f"{name}.{layers + 1}", channels, 1, nd=3))

    def forward(self, cost: Tensor) -> Tensor:
        n, d, h, w = cost.shape
        x = ops.reshape(cost, (n, 1, d, h, w))
        for layer in self.layers:
            x = layer(x)
        return ops.reshape(x, (n, d, h, w))


class AnyNet(Module):
    task = "stereo"

    def __init__(self, config: AnyNetConfig, seed: int = 0):
        self.config = config
        self.store = ParamStore()
        self.features = FeatureUNet(self.store, config.unet_base_channels, config.unet_blocks)
        self.disp_nets = [
            DisparityNet(self.store, f"disp{i}", config.disparity_net_channels * config.growth_rate[i],
                         config.disparity_net_layers)
            for i in range(3)
        ]
        self.spn = SPNRefiner(self.store, config.spn_channels) if config.spn_channels else None
        init_parameters(self.store, seed)

    def flop_inputs(self, shape: tuple) -> tuple:
        return Tensor(np.zeros(shape)), Tensor(np.zeros(shape))

    def forward(self, left, right, up_to_stage: int = 4) -> List[Tensor]:
        """Full-resolution disparity maps (pixels) for stages 1..up_to_stage."""
        if up_to_stage not in (1, 2, 3, 4):
            raise ValueError(f"up_to_stage must be 1..4, got {up_to_stage}")
        left, right = as_tensor(left), as_tensor(right)
        n, _, h, w = left.shape
        if h % 16 or w % 16:
            raise ValueError(f"input {h}x{w} not divisible by 16")
        cfg = self.config
        fl, fr = self.features(left), self.features(right)
        outs: List[Tensor] = []

        # stage 1: plain cost volume at 1/16
        d_cands = cfg.max_disparity // SCALES[0] + 1
        cv = cost_volume_full(fl[0], fr[0], d_cands)
        cv.cost = self.disp_nets[0](cv.cost)
        disp = soft_argmin(cv)  # in 1/16-scale pixels
        outs.append(self._to_full(disp, SCALES[0], h, w))

        # stages 2-3: warp and estimate a residual at 1/8 and 1/4
        for stage in (1, 2):
            if up_to_stage <= stage:
                return outs
            f_l, f_r = fl[stage], fr[stage]
            base = ops.resize_bilinear(disp, f_l.shape[2], f_l.shape[3]) * 2.0
            warped = warp_with_disparity(f_r, base)
            cv = cost_volume_residual(f_l, warped, cfg.residual_range, base)
            cv.cost = self.disp_nets[stage](cv.cost)
            disp = soft_argmin(cv)
            outs.append(self._to_full(disp, SCALES[stage], h, w))

        if up_to_stage == 4:
            if self.spn is None:
                outs.append(outs[-1])
            else:
                guide = ops.resize_bilinear(left, disp.shape[2], disp.shape[3])
                refined = self.spn(disp, guide, cfg.max_disparity / SCALES[2])
                outs.append(self._to_full(refined, SCALES[2], h, w))
        return outs

    @staticmethod
    def _to_full(disp: Tensor, scale: int, h: int, w: int) -> Tensor:
        return ops.resize_bilinear(disp, h, w) * float(scale)


def build_anynet(config: AnyNetConfig, seed: int = 0) -> AnyNet:
    return AnyNet(config, seed)


def anynet_forward(model: AnyNet, left, right, up_to_stage: int = 4) -> List[Tensor]:
    return model(left, right, up_to_stage)


# ---------------------------------------------------------------------------
# losses and metrics
# ---------------------------------------------------------------------------


def smooth_l1_loss(pred: Tensor, target, mask, beta: float = 1.0) -> Tensor:
    """Masked mean of d^2 / (2 beta) below |d| < beta and |d| - beta / 2 above."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    d = ops.sub(target, pred)
    quad = (np.abs(d.data) < beta).astype(DTYPE)
    ops.note_branch(quad)
    per = ops.square(d) * (quad / (2.0 * beta)) + (ops.abs(d) - 0.5 * beta) * (1.0 - quad)
    return ops.masked_mean(per, mask)


def three_pixel_error(pred, target, mask, variant: str = "absolute") -> float:
    """Fraction of valid pixels with |error| > 3 (kitti variant: and > 5% of the true value)."""
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred, dtype=DTYPE)
    t = np.asarray(target, dtype=DTYPE)
    m = np.broadcast_to(np.asarray(mask) > 0, t.shape)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    if not m.any():
        raise ValueError("three_pixel_error over an empty mask")
    err = np.abs(p - t)
    bad = err > 3.0
    if variant == "kitti":
        bad &= err > 0.05 * np.abs(t)
    elif variant != "absolute":
        raise ValueError(f"unknown variant {variant!r}")
    return float(bad[m].mean())


def stereo_total_loss(stage_disparities: Sequence[Tensor], target, mask, weights: Sequence[float],
                      beta: float = 1.0) -> Tensor:
    """Weighted sum of per-stage smooth-L1 losses, one weight per computed stage."""
    if len(weights) != len(stage_disparities):
        raise ValueError(f"{len(weights)} weights for {len(stage_disparities)} stages")
    total = None
    for w, d in zip(weights, stage_disparities):
        term = smooth_l1_loss(d, target, mask, beta) * float(w)
        total = term if total is None else total + term
    return total
