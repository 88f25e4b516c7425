"""File formats, resampling, splitting, synthetic scenes and point-cloud export."""
from __future__ import annotations

import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import gaussian_filter

from .mono import MonoSample
from .ops import bilinear_matrix
from .stereo import StereoSample


class FormatError(ValueError):
    pass


def atomic_write(path: Union[str, Path], payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------


@dataclass
class PfmImage:
    data: np.ndarray  # HxW or HxWx3 float32, top row first
    scale: float = 1.0  # |scale| from the header
    little_endian: bool = True


def _read_token_line(buf: bytes, pos: int) -> Tuple[str, int]:
    end = buf.find(b"\n", pos)
    if end < 0:
        raise FormatError("truncated PFM header")
    return buf[pos:end].decode("ascii"), end + 1


def read_pfm(buf: bytes) -> PfmImage:
    magic, pos = _read_token_line(buf, 0)
    magic = magic.strip()
    if magic == "PF":
        channels = 3
    elif magic == "Pf":
        channels = 1
    else:
        raise FormatError(f"bad PFM magic {magic!r}")
    dims, pos = _read_token_line(buf, pos)
    m = re.fullmatch(r"\s*(\d+)\s+(\d+)\s*", dims)
    if not m:
        raise FormatError(f"malformed PFM dimensions {dims!r}")
    width, height = int(m.group(1)), int(m.group(2))
    if width < 1 or height < 1:
        raise FormatError("PFM dimensions must be positive")
    scale_line, pos = _read_token_line(buf, pos)
    try:
        scale = float(scale_line.strip())
    except ValueError:
        raise FormatError(f"malformed PFM scale {scale_line!r}") from None
    if scale == 0:
        raise FormatError("PFM scale must be non-zero")
    little = scale < 0
    count = width * height * channels
    payload = buf[pos:]
    if len(payload) < 4 * count:
        raise FormatError(f"truncated PFM payload: {len(payload)} < {4 * count} bytes")
    arr = np.frombuffer(payload, dtype="<f4" if little else ">f4", count=count)
    shape = (height, width, 3) if channels == 3 else (height, width)
    data = np.flipud(arr.reshape(shape)).astype(np.float32)
    return PfmImage(data, abs(scale), little)


def write_pfm(image: Union[PfmImage, np.ndarray], scale: float = 1.0, little_endian: bool = True) -> bytes:
    if isinstance(image, PfmImage):
        data, scale, little_endian = image.data, image.scale, image.little_endian
    else:
        data = np.asarray(image)
    if scale == 0:
        raise FormatError("PFM scale must be non-zero")
    if data.ndim == 3 and data.shape[2] == 3:
        magic = "PF"
    elif data.ndim == 2:
        magic = "Pf"
    else:
        raise FormatError(f"PFM holds HxW or HxWx3 maps, got {data.shape}")
    h, w = data.shape[:2]
    signed = -abs(scale) if little_endian else abs(scale)
    header = f"{magic}\n{w} {h}\n{signed!r}\n".encode("ascii")
    body = np.flipud(data).astype("<f4" if little_endian else ">f4").tobytes()
    return header + body


# ---------------------------------------------------------------------------
# binary PPM / PGM
# ---------------------------------------------------------------------------


def _pnm_tokens(buf: bytes, n: int) -> Tuple[List[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < n:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PNM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte before the raster


def read_pnm(buf: bytes) -> np.ndarray:
    """Binary P6/P5 -> float CxHxW in [0, 1]."""
    (magic, w, h, maxval), pos = _pnm_tokens(buf, 4)
    if magic in (b"P3", b"P2"):
        raise FormatError("ASCII PNM variants are not supported")
    if magic not in (b"P6", b"P5"):
        raise FormatError(f"bad PNM magic {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    c = 3 if magic == b"P6" else 1
    n = w * h * c
    raster = buf[pos:pos + n]
    if len(raster) < n:
        raise FormatError("truncated PNM raster")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, c)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_pnm(image: np.ndarray) -> bytes:
    """CxHxW (C in {1, 3}) or HxW float in [0, 1] -> binary P6/P5."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    if c not in (1, 3):
        raise FormatError(f"PNM needs 1 or 3 channels, got {c}")
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    magic = "P6" if c == 3 else "P5"
    return f"{magic}\n{w} {h}\n255\n".encode("ascii") + q.transpose(1, 2, 0).tobytes()


# ---------------------------------------------------------------------------
# resampling and normalization
# ---------------------------------------------------------------------------


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int, is_disparity: bool = False) -> np.ndarray:
    """Resize the last two axes (half-pixel centers); disparity values scale by out_w / in_w."""
    if out_h < 1 or out_w < 1:
        raise ValueError("target extents must be positive")
    img = np.asarray(image, dtype=np.float64)
    in_h, in_w = img.shape[-2:]
    out = bilinear_matrix(in_h, out_h) @ img @ bilinear_matrix(in_w, out_w).T
    if is_disparity:
        out = out * (out_w / in_w)
    return out


def normalize_depth(depth: np.ndarray, d_min: Optional[float] = None, d_max: Optional[float] = None) -> np.ndarray:
    """Clip to [d_min, d_max] and map affinely to [0, 1].

    Missing bounds come from the map itself; a constant map then normalizes to zeros.
    """
    d = np.asarray(depth, dtype=np.float64)
    lo = float(d.min()) if d_min is None else float(d_min)
    hi = float(d.max()) if d_max is None else float(d_max)
    if hi < lo:
        raise ValueError(f"d_max ({hi}) must exceed d_min ({lo})")
    if hi == lo:
        return np.zeros_like(d)
    return (np.clip(d, lo, hi) - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# dataset index, manifest, splitting
# ---------------------------------------------------------------------------


@dataclass
class DatasetIndex:
    descriptors: List[str]
    kind: str = "stereo"
    depth_min: float = 0.0
    depth_max: float = 1.0
    root: Optional[Path] = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in ("mono", "stereo"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if len(set(self.descriptors)) != len(self.descriptors):
            raise ValueError("dataset descriptors must be unique")

    def __len__(self) -> int:
        return len(self.descriptors)

    def subset(self, descriptors: Sequence[str]) -> "DatasetIndex":
        return DatasetIndex(list(descriptors), self.kind, self.depth_min, self.depth_max, self.root)


def write_manifest(index: DatasetIndex) -> str:
    lines = [
        "# depthbench manifest v1",
        f"#@ kind={index.kind}",
        f"#@ depth_min={index.depth_min!r}",
        f"#@ depth_max={index.depth_max!r}",
    ]
    return "\n".join(lines + list(index.descriptors)) + "\n"


def read_manifest(text: str, root: Optional[Path] = None) -> DatasetIndex:
    settings = {}
    descriptors = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#@"):
            key, _, value = line[2:].strip().partition("=")
            settings[key.strip()] = value.strip()
        elif not line.startswith("#"):
            descriptors.append(line)
    return DatasetIndex(
        descriptors,
        settings.get("kind", "stereo"),
        float(settings.get("depth_min", 0.0)),
        float(settings.get("depth_max", 1.0)),
        root,
    )


def split_dataset(index, ratio: float = 0.9, seed: int = 0):
    """Seeded shuffle, then the first round(ratio * N) go to train."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must be in (0, 1)")
    items = list(index.descriptors if isinstance(index, DatasetIndex) else index)
    n = len(items)
    if n < 2:
        raise ValueError("need at least two samples to split")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(ratio * n + 0.5))
    train = [items[i] for i in perm[:n_train]]
    test = [items[i] for i in perm[n_train:]]
    if isinstance(index, DatasetIndex):
        return index.subset(train), index.subset(test)
    return train, test


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------


def _texture(rng: np.random.Generator, h: int, w: int, amplitude: float, sigma: float) -> np.ndarray:
    noise = rng.standard_normal((3, h, w))
    smooth = gaussian_filter(noise, sigma=(0, sigma, sigma), mode="wrap")
    smooth /= max(float(np.abs(smooth).max()), 1e-12)
    return amplitude * smooth


def _stereo_scene(rng: np.random.Generator, h: int, w: int, max_disp: int) -> StereoSample:
    cw = w + max_disp  # textures extend past the right edge so right-view lookups stay defined
    bg_disp = int(rng.integers(0, 3))
    layers = [(bg_disp, (0, h, 0, cw), rng.uniform(0.25, 0.75, 3))]
    for _ in range(int(rng.integers(3, 9))):
        d = int(rng.integers(bg_disp + 1, max_disp + 1))
        rh = int(rng.integers(max(2, h // 6), max(3, h // 2) + 1))
        rw = int(rng.integers(max(2, w // 8), max(3, w // 3) + 1))
        y0 = int(rng.integers(0, h - rh + 1))
        x0 = int(rng.integers(0, w - rw + 1))
        layers.append((d, (y0, y0 + rh, x0, x0 + rw), rng.uniform(0.1, 0.9, 3)))
    layers.sort(key=lambda l: l[0])  # far (small disparity) painted first

    left = np.zeros((3, h, w))
    right = np.zeros((3, h, w))
    left_id = np.zeros((h, w), dtype=np.int64)
    right_id = np.zeros((h, w), dtype=np.int64)
    disp = np.zeros((h, w))
    xs = np.arange(w)
    for lid, (d, (y0, y1, x0, x1), color) in enumerate(layers):
        tex = np.clip(color[:, None, None] + _texture(rng, h, cw, 0.35, 1.2), 0.0, 1.0)
        lx0, lx1 = x0, min(x1, w)
        left[:, y0:y1, lx0:lx1] = tex[:, y0:y1, lx0:lx1]
        left_id[y0:y1, lx0:lx1] = lid
        disp[y0:y1, lx0:lx1] = d
        # right pixel xr shows world column xr + d of this layer
        cols = xs[(xs + d >= x0) & (xs + d < x1)]
        if cols.size:
            right[:, y0:y1, cols] = tex[:, y0:y1][:, :, cols + d]
            right_id[y0:y1, cols] = lid
    yy, xx = np.mgrid[0:h, 0:w]
    xr = xx - disp.astype(np.int64)
    inside = xr >= 0
    visible = np.zeros((h, w), dtype=bool)
    visible[inside] = right_id[yy[inside], xr[inside]] == left_id[inside]
    return StereoSample(left, right, disp[None], visible[None].astype(np.float64))


def gen_synthetic_stereo(seed: int, count: int, h: int = 48, w: int = 96, max_disp: int = 16) -> List[StereoSample]:
    """Layered textured rectangles at integer disparities with exact ground truth."""
    if max_disp >= w / 4:
        raise ValueError(f"max_disp {max_disp} must be below w/4 = {w / 4}")
    rng = np.random.default_rng(seed)
    return [_stereo_scene(rng, h, w, max_disp) for _ in range(count)]


def _mono_scene(rng: np.random.Generator, h: int, w: int, near: float, far: float) -> MonoSample:
    yy = np.linspace(0.0, 1.0, h)[:, None]
    top, bottom = rng.uniform(0.7, 1.0) * far, rng.uniform(0.35, 0.6) * far
    depth = np.broadcast_to(top + (bottom - top) * yy, (h, w)).copy()
    tint = np.broadcast_to(rng.uniform(0.85, 1.0, 3)[:, None, None], (3, h, w)).copy()
    for _ in range(int(rng.integers(2, 7))):
        rh = int(rng.integers(max(2, h // 8), max(3, h // 2) + 1))
        rw = int(rng.integers(max(2, w // 8), max(3, w // 2) + 1))
        y0 = int(rng.integers(0, h - rh + 1))
        x0 = int(rng.integers(0, w - rw + 1))
        z = rng.uniform(near, 0.9 * far)
        region = (slice(y0, y0 + rh), slice(x0, x0 + rw))
        closer = depth[region] > z
        depth[region] = np.where(closer, z, depth[region])
        t = rng.uniform(0.85, 1.0, 3)[:, None, None]
        tint[(slice(None),) + region] = np.where(closer[None], t, tint[(slice(None),) + region])
    nd = normalize_depth(depth, near, far)
    rgb = tint * (1.0 - 0.75 * nd)[None] + _texture(rng, h, w, 0.04, 1.0)
    return MonoSample(np.clip(rgb, 0.0, 1.0), nd[None], np.ones((1, h, w)))


def gen_synthetic_mono(seed: int, count: int, h: int = 64, w: int = 64,
                       near: float = 1.0, far: float = 10.0) -> List[MonoSample]:
    """Shaded rectangles over a receding floor; brightness falls with depth."""
    rng = np.random.default_rng(seed)
    return [_mono_scene(rng, h, w, near, far) for _ in range(count)]


# ---------------------------------------------------------------------------
# collation and disk round-trip
# ---------------------------------------------------------------------------


def collate(samples: Sequence[Union[MonoSample, StereoSample]]):
    first = samples[0]
    cls = type(first)
    return cls(*(np.stack([getattr(s, f) for s in samples]) for f in first.__dataclass_fields__))


def save_dataset(samples: Sequence, out_dir: Union[str, Path], prefix: str = "sample",
                 depth_min: float = 0.0, depth_max: float = 1.0) -> DatasetIndex:
    out = Path(out_dir)
    kind = "stereo" if isinstance(samples[0], StereoSample) else "mono"
    stems = []
    for i, s in enumerate(samples):
        stem = f"{prefix}_{i:05d}"
        stems.append(stem)
        if kind == "stereo":
            atomic_write(out / f"{stem}_left.ppm", write_pnm(s.left))
            atomic_write(out / f"{stem}_right.ppm", write_pnm(s.right))
            atomic_write(out / f"{stem}_disp.pfm", write_pfm(s.disparity[0].astype(np.float32)))
        else:
            atomic_write(out / f"{stem}_rgb.ppm", write_pnm(s.rgb))
            atomic_write(out / f"{stem}_depth.pfm", write_pfm(s.depth[0].astype(np.float32)))
        atomic_write(out / f"{stem}_mask.pgm", write_pnm(s.mask))
    index = DatasetIndex(stems, kind, depth_min, depth_max, out)
    atomic_write(out / "manifest.txt", write_manifest(index).encode("ascii"))
    return index


def load_dataset(manifest_path: Union[str, Path]) -> Tuple[DatasetIndex, List]:
    """Read a manifest and every sample it lists (paths relative to the manifest)."""
    path = Path(manifest_path)
    index = read_manifest(path.read_text(), path.parent)
    samples = []
    for stem in index.descriptors:
        base = path.parent / stem
        mask = read_pnm((base.parent / f"{base.name}_mask.pgm").read_bytes())
        mask = (mask > 0.5).astype(np.float64)
        if index.kind == "stereo":
            left = read_pnm(Path(f"{base}_left.ppm").read_bytes())
            right = read_pnm(Path(f"{base}_right.ppm").read_bytes())
            disp = read_pfm(Path(f"{base}_disp.pfm").read_bytes()).data.astype(np.float64)[None]
            samples.append(StereoSample(left, right, disp, mask))
        else:
            rgb = read_pnm(Path(f"{base}_rgb.ppm").read_bytes())
            depth = read_pfm(Path(f"{base}_depth.pfm").read_bytes()).data.astype(np.float64)
            depth = normalize_depth(depth, index.depth_min, index.depth_max)[None]
            samples.append(MonoSample(rgb, depth, mask))
    return index, samples


# ---------------------------------------------------------------------------
# point clouds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")


def depth_to_pointcloud(depth: np.ndarray, intrinsics: CameraIntrinsics,
                        mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Pinhole back-projection of every valid pixel -> (N, 3) array of X, Y, Z."""
    z = np.asarray(depth, dtype=np.float64)
    z = z.reshape(z.shape[-2:])
    valid = np.ones(z.shape, dtype=bool) if mask is None else np.asarray(mask).reshape(z.shape) > 0
    ys, xs = np.nonzero(valid)
    zz = z[ys, xs]
    if np.any(zz <= 0):
        raise ValueError("depths at valid pixels must be positive")
    X = (xs - intrinsics.cx) * zz / intrinsics.fx
    Y = (ys - intrinsics.cy) * zz / intrinsics.fy
    return np.stack([X, Y, zz], axis=1)


def write_ply(points: np.ndarray) -> bytes:
    head = f"ply\nformat ascii 1.0\nelement vertex {len(points)}\nproperty float x\nproperty float y\nproperty float z\nend_header\n"
    body = "".join(f"{x:.6g} {y:.6g} {z:.6g}\n" for x, y, z in points)
    return (head + body).encode("ascii")
