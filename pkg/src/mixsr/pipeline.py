"""Image-level inference: the x2 cascade and colour recombination."""

from __future__ import annotations

from typing import Callable, Optional, Union

import numpy as np

from .imaging import PlanarImage, bicubic_resize, rgb_to_ycbcr, ycbcr_to_rgb
from .mixture import MixtureNetwork

Predictor = Union[MixtureNetwork, Callable[[np.ndarray], np.ndarray]]


def cascade_passes(scale: float) -> int:
    """Number of x2 passes needed to reach at least ``scale`` (``ceil(log2 scale)``)."""
    if scale <= 1:
        raise ValueError(f"scale must be > 1, got {scale}")
    passes = 0
    while 2**passes < scale:
        passes += 1
    return passes


def target_size(width: int, height: int, scale: float):
    return int(round(width * scale)), int(round(height * scale))


def run_network(net: Predictor, y: PlanarImage) -> PlanarImage:
    """Apply a network (or any ``(B,1,H,W) -> (B,1,H,W)`` callable) to one image."""
    x = y.data[None, None]
    out = net.predict(x) if isinstance(net, MixtureNetwork) else net(x)
    return PlanarImage(np.asarray(out)[0, 0])


def upscale_luminance(net: Optional[Predictor], lr: PlanarImage, scale: float, stats: Optional[dict] = None) -> PlanarImage:
    """Super-resolve a single-channel image by ``scale``.

    Each pass bicubic-doubles the current image and refines it with ``net``;
    if the cascade overshoots, the result is bicubic-downsized to the exact
    target. ``net=None`` gives the plain bicubic baseline. Pass counts are
    recorded in ``stats`` when given.
    """
    if lr.channels != 1:
        raise ValueError("upscale_luminance needs a single-channel image")
    tw, th = target_size(lr.width, lr.height, scale)
    if net is None:
        if stats is not None:
            stats.update(passes=0, downsized=False)
        return bicubic_resize(lr, tw, th)
    passes = cascade_passes(scale)
    cur = lr
    for _ in range(passes):
        cur = run_network(net, bicubic_resize(cur, 2 * cur.width, 2 * cur.height))
    downsized = (cur.width, cur.height) != (tw, th)
    if downsized:
        cur = bicubic_resize(cur, tw, th)
    if stats is not None:
        stats.update(passes=passes, downsized=downsized)
    return cur


def super_resolve(net: Optional[Predictor], img: PlanarImage, scale: float, stats: Optional[dict] = None) -> PlanarImage:
    """Colour-aware SR: the network sees only Y, chrominance is bicubic-upscaled."""
    if img.channels == 1:
        return upscale_luminance(net, img, scale, stats)
    ycc = rgb_to_ycbcr(img)
    y = upscale_luminance(net, PlanarImage(ycc.data[:, :, 0]), scale, stats)
    cb = bicubic_resize(PlanarImage(ycc.data[:, :, 1]), y.width, y.height)
    cr = bicubic_resize(PlanarImage(ycc.data[:, :, 2]), y.width, y.height)
    return ycbcr_to_rgb(PlanarImage(np.stack([y.data, cb.data, cr.data], axis=-1)))
