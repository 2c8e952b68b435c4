"""Image I/O, BT.601 luminance, bicubic resampling and training patch sampling."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

CUBIC_A = -0.5

# MATLAB-convention studio-swing BT.601 (RGB in [0, 1], YCbCr in [0, 255])
_YCBCR_MATRIX = np.array(
    [
        [65.481, 128.553, 24.966],
        [-37.797, -74.203, 112.0],
        [112.0, -93.786, -18.214],
    ]
)
_YCBCR_OFFSET = np.array([16.0, 128.0, 128.0])
_YCBCR_INVERSE = np.linalg.inv(_YCBCR_MATRIX)

_WRITE_FORMATS = {".png": "PNG", ".ppm": "PPM", ".pgm": "PPM", ".pnm": "PPM"}


class ImageError(Exception):
    """Raised for unreadable, unsupported or malformed image files."""


@dataclass
class PlanarImage:
    """Single- or three-channel float image with values clamped to [0, 1].

    ``data`` has shape ``(height, width)`` for one channel and
    ``(height, width, 3)`` for three.
    """

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 3 and data.shape[2] == 1:
            data = data[:, :, 0]
        if not (data.ndim == 2 or (data.ndim == 3 and data.shape[2] == 3)):
            raise ValueError(f"image data must be (H, W) or (H, W, 3), got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"image dimensions must be positive, got {data.shape}")
        self.data = np.clip(data, 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else 3

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width


@dataclass
class PatchPair:
    """Degraded-and-reupscaled input patch and its ground-truth patch."""

    lr: PlanarImage
    hr: PlanarImage


# ---------------------------------------------------------------------------
# I/O


def load_image(path) -> PlanarImage:
    """Read an 8-bit PNG or binary PPM/PGM file."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise ImageError(f"image file not found: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I", "I;16", "I;16B", "I;16L", "I;16N", "F"):
                raise ImageError(f"{path}: only 8-bit images are supported (got mode {mode})")
            if mode in ("1", "L", "LA"):
                arr = np.asarray(im.convert("L"))
            elif mode in ("RGB", "RGBA", "P", "PA"):
                arr = np.asarray(im.convert("RGB"))
            else:
                raise ImageError(f"{path}: unsupported image mode {mode}")
    except ImageError:
        raise
    except Exception as exc:
        raise ImageError(f"cannot read image {path}: {exc}") from exc
    return PlanarImage(arr.astype(np.float32) / 255.0)


def to_uint8(img: PlanarImage) -> np.ndarray:
    # round half up, matching the metrics' quantization
    return np.floor(img.data.astype(np.float64) * 255.0 + 0.5).astype(np.uint8)


def save_image(img: PlanarImage, path) -> None:
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    if ext not in _WRITE_FORMATS:
        raise ImageError(f"unsupported output format {ext!r} for {path}; use .png, .ppm or .pgm")
    if ext == ".pgm" and img.channels != 1:
        raise ImageError(f"{path}: PGM needs a single-channel image")
    if ext == ".ppm" and img.channels != 3:
        raise ImageError(f"{path}: PPM needs a three-channel image")
    Image.fromarray(to_uint8(img)).save(path, format=_WRITE_FORMATS[ext])


# ---------------------------------------------------------------------------
# colour


def rgb_to_ycbcr(img: PlanarImage) -> PlanarImage:
    """Studio-swing BT.601: Y in [16, 235]/255, Cb/Cr in [16, 240]/255."""
    if img.channels != 3:
        raise ValueError(f"rgb_to_ycbcr needs a 3-channel image, got {img.channels}")
    rgb = img.data.astype(np.float64)
    ycc = rgb @ _YCBCR_MATRIX.T + _YCBCR_OFFSET
    return PlanarImage(ycc / 255.0)


def ycbcr_to_rgb(img: PlanarImage) -> PlanarImage:
    if img.channels != 3:
        raise ValueError(f"ycbcr_to_rgb needs a 3-channel image, got {img.channels}")
    ycc = img.data.astype(np.float64) * 255.0
    return PlanarImage((ycc - _YCBCR_OFFSET) @ _YCBCR_INVERSE.T)


def rgb_to_y(img: PlanarImage) -> PlanarImage:
    return PlanarImage(rgb_to_ycbcr(img).data[:, :, 0])


def luminance(img: PlanarImage) -> PlanarImage:
    """Y channel of a colour image; single-channel images pass through."""
    return img if img.channels == 1 else rgb_to_y(img)


# ---------------------------------------------------------------------------
# resampling


def cubic_kernel(x: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


def resize_weights(in_len: int, out_len: int, antialias: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Tap indices and normalized weights for one axis, each ``(out_len, taps)``.

    On downscaling with ``antialias`` the kernel is stretched by the inverse
    scale, widening its support. Out-of-range taps are clamped to the edge.
    """
    scale = out_len / in_len
    stretch = antialias and scale < 1
    width = 4.0 / scale if stretch else 4.0
    # 0-based centre of each output pixel in input coordinates
    u = (np.arange(out_len) + 0.5) / scale - 0.5
    left = np.floor(u - width / 2).astype(np.int64)
    taps = int(np.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    dist = u[:, None] - idx
    w = scale * cubic_kernel(scale * dist) if stretch else cubic_kernel(dist)
    w = w / w.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, in_len - 1)
    keep = np.any(w != 0, axis=0)
    return idx[:, keep], w[:, keep]


def _resize_axis(x: np.ndarray, out_len: int, axis: int, antialias: bool) -> np.ndarray:
    idx, w = resize_weights(x.shape[axis], out_len, antialias)
    x = np.moveaxis(x, axis, 0)
    shape = (out_len,) + (1,) * (x.ndim - 1)
    acc = np.zeros((out_len,) + x.shape[1:], dtype=np.float64)
    for t in range(idx.shape[1]):
        acc += w[:, t].reshape(shape) * x[idx[:, t]]
    return np.moveaxis(acc, 0, axis)


def bicubic_resize(img: PlanarImage, width: int, height: int, antialias: bool = True) -> PlanarImage:
    """Separable cubic-convolution resize (a = -0.5), computed in float64."""
    if width < 1 or height < 1:
        raise ValueError(f"target size must be at least 1x1, got {width}x{height}")
    x = img.data.astype(np.float64)
    if height != img.height:
        x = _resize_axis(x, height, 0, antialias)
    if width != img.width:
        x = _resize_axis(x, width, 1, antialias)
    return PlanarImage(x)


def modcrop(img: PlanarImage, scale: int) -> PlanarImage:
    h = img.height - img.height % scale
    w = img.width - img.width % scale
    if h < 1 or w < 1:
        raise ValueError(f"image {img.width}x{img.height} is smaller than scale {scale}")
    return PlanarImage(img.data[:h, :w])


def degrade(hr: PlanarImage, scale: int) -> Tuple[PlanarImage, PlanarImage]:
    """Return ``(lr, lr_upscaled)`` for the modulo-cropped ``hr``.

    ``lr_upscaled`` is back on the (cropped) HR grid.
    """
    hr = modcrop(hr, scale)
    lr = bicubic_resize(hr, hr.width // scale, hr.height // scale, antialias=True)
    return lr, bicubic_resize(lr, hr.width, hr.height)


def shave_border(img: PlanarImage, s: int) -> PlanarImage:
    if s < 0:
        raise ValueError(f"border must be non-negative, got {s}")
    if s == 0:
        return img
    if img.height <= 2 * s or img.width <= 2 * s:
        raise ValueError(f"image {img.width}x{img.height} too small to shave {s} pixels per side")
    return PlanarImage(img.data[s:-s, s:-s])


# ---------------------------------------------------------------------------
# patch sampling


def dihedral(a: np.ndarray, k: int) -> np.ndarray:
    """Element ``k`` in 0..7 of the square's symmetry group: ``k % 4`` quarter turns, flipped if ``k >= 4``."""
    out = np.rot90(a, k % 4, axes=(0, 1))
    if k >= 4:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


@dataclass(frozen=True)
class Augmentation:
    """``dihedral`` adds the 3 rotations and 4 reflections of each patch;
    ``scales`` adds pre-downscaled copies of every source image."""

    dihedral: bool = False
    scales: Tuple[float, ...] = ()

    @classmethod
    def full(cls) -> "Augmentation":
        return cls(dihedral=True, scales=(0.9, 0.8, 0.7, 0.6))


def _variants(corpus: Sequence[PlanarImage], scale: int, patch_size: int, aug: Augmentation):
    variants = []
    for img in corpus:
        y = luminance(img)
        for factor in (1.0,) + tuple(aug.scales):
            if factor != 1.0:
                w, h = int(round(y.width * factor)), int(round(y.height * factor))
                if w < patch_size or h < patch_size:
                    continue
                src = bicubic_resize(y, w, h)
            else:
                src = y
            _, up = degrade(src, scale)
            variants.append((up.data, modcrop(src, scale).data))
    return variants


def extract_patch_pairs(
    corpus: Sequence[PlanarImage],
    scale: int = 2,
    patch_size: int = 56,
    stride: Optional[int] = None,
    augment: Augmentation = Augmentation(),
) -> List[Tuple[int, int, int, int]]:
    """Index of every patch in one epoch as ``(variant, row, col, dihedral_op)``."""
    _check_corpus(corpus, patch_size)
    return _patch_index(_variants(corpus, scale, patch_size, augment), patch_size, stride, augment)


def _patch_index(variants, patch_size: int, stride: Optional[int], augment: Augmentation):
    stride = patch_size if stride is None else stride
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    ops = range(8) if augment.dihedral else range(1)
    index = []
    for v, (lr, _) in enumerate(variants):
        h, w = lr.shape
        for r in range(0, h - patch_size + 1, stride):
            for c in range(0, w - patch_size + 1, stride):
                index.extend((v, r, c, k) for k in ops)
    return index


def _check_corpus(corpus: Sequence[PlanarImage], patch_size: int) -> None:
    if len(corpus) == 0:
        raise ValueError("training corpus is empty")
    for i, img in enumerate(corpus):
        if img.height < patch_size or img.width < patch_size:
            raise ValueError(f"corpus image {i} ({img.width}x{img.height}) is smaller than patch size {patch_size}")


def sample_patches(
    corpus: Sequence[PlanarImage],
    scale: int = 2,
    patch_size: int = 56,
    stride: Optional[int] = None,
    augment: Augmentation = Augmentation(),
    seed: int = 0,
    shuffle: bool = True,
    epochs: Optional[int] = 1,
) -> Iterator[PatchPair]:
    """Stream ``PatchPair`` objects, reshuffled each epoch from ``seed``.

    Rotations and flips are applied to both patches after degradation,
    which is equivalent to degrading the rotated image because the
    separable resampler commutes with the square's symmetries.
    ``epochs=None`` streams forever.
    """
    for lr, hr in sample_patch_arrays(corpus, scale, patch_size, stride, augment, seed, shuffle, epochs):
        yield PatchPair(PlanarImage(lr), PlanarImage(hr))


def sample_patch_arrays(
    corpus: Sequence[PlanarImage],
    scale: int = 2,
    patch_size: int = 56,
    stride: Optional[int] = None,
    augment: Augmentation = Augmentation(),
    seed: int = 0,
    shuffle: bool = True,
    epochs: Optional[int] = 1,
) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Array form of :func:`sample_patches`: yields ``(lr, hr)`` float32 pairs."""
    _check_corpus(corpus, patch_size)
    variants = _variants(corpus, scale, patch_size, augment)
    index = _patch_index(variants, patch_size, stride, augment)
    if not index:
        raise ValueError("no patches could be extracted from the corpus")
    rng = np.random.default_rng(seed)
    epoch = 0
    while epochs is None or epoch < epochs:
        order = rng.permutation(len(index)) if shuffle else np.arange(len(index))
        for i in order:
            v, r, c, k = index[i]
            lr, hr = variants[v]
            sl = (slice(r, r + patch_size), slice(c, c + patch_size))
            yield dihedral(lr[sl], k), dihedral(hr[sl], k)
        epoch += 1


def stack_luminance(images: Sequence[np.ndarray]) -> np.ndarray:
    """Stack equally sized 2-D arrays into a ``(B, 1, H, W)`` float32 batch."""
    return np.stack([np.asarray(a, dtype=np.float32) for a in images])[:, None]
