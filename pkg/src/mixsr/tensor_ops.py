"""Dense NCHW kernels with hand-written backward passes.

Every signal in the package is a rank-4 ``numpy`` array laid out as
``(batch, channels, height, width)``. Kernels compute in the dtype of their
inputs, so the same code runs in float32 for training and in float64 when the
gradient checker asks for it.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


def _check_rank4(name: str, x: np.ndarray) -> None:
    if x.ndim != 4:
        raise ValueError(f"{name} must be rank-4 (batch, channels, height, width), got shape {x.shape}")


@dataclass(frozen=True)
class ConvSpec:
    """Shape contract of a stride-1, zero-padded 2-D convolution."""

    in_channels: int
    out_channels: int
    kernel_height: int
    kernel_width: int
    padding: int = 0
    stride: int = 1

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_height", "kernel_width"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"ConvSpec.{name} must be positive, got {getattr(self, name)}")
        if self.padding < 0:
            raise ValueError(f"ConvSpec.padding must be non-negative, got {self.padding}")
        if self.stride != 1:
            raise ValueError(f"only stride 1 is supported, got {self.stride}")

    @classmethod
    def same(cls, in_channels: int, out_channels: int, kernel: int) -> "ConvSpec":
        """Square odd kernel with padding that preserves spatial size."""
        if kernel % 2 != 1:
            raise ValueError(f"'same' convolution needs an odd kernel, got {kernel}")
        return cls(in_channels, out_channels, kernel, kernel, padding=(kernel - 1) // 2)

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel_height, self.kernel_width)

    def output_size(self, height: int, width: int) -> Tuple[int, int]:
        oh = height + 2 * self.padding - self.kernel_height + 1
        ow = width + 2 * self.padding - self.kernel_width + 1
        if oh < 1 or ow < 1:
            raise ValueError(
                f"input {height}x{width} too small for kernel "
                f"{self.kernel_height}x{self.kernel_width} with padding {self.padding}"
            )
        return oh, ow


@dataclass(eq=False)
class Parameter:
    """A trainable tensor with its gradient accumulator and momentum buffer."""

    value: np.ndarray
    lr_scale: float = 1.0
    grad: np.ndarray = field(init=False)
    momentum: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.lr_scale <= 0:
            raise ValueError(f"lr_scale must be positive, got {self.lr_scale}")
        self.value = np.ascontiguousarray(self.value)
        self.grad = np.zeros_like(self.value)
        self.momentum = np.zeros_like(self.value)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def astype(self, dtype) -> "Parameter":
        p = Parameter(self.value.astype(dtype), lr_scale=self.lr_scale)
        p.momentum[...] = self.momentum
        return p


def _check_conv_shapes(x: np.ndarray, weights: np.ndarray, spec: ConvSpec) -> None:
    _check_rank4("conv input", x)
    if weights.shape != spec.weight_shape:
        raise ValueError(f"weight shape {weights.shape} does not match ConvSpec weight shape {spec.weight_shape}")
    if x.shape[1] != spec.in_channels:
        raise ValueError(
            f"input shape {x.shape} has {x.shape[1]} channels but weights {weights.shape} expect {spec.in_channels}"
        )


def _im2col(x: np.ndarray, spec: ConvSpec) -> Tuple[np.ndarray, int, int]:
    """Unfold ``x`` into a (C*kh*kw, batch*oh*ow) matrix."""
    p = spec.padding
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    b, c = x.shape[:2]
    oh = x.shape[2] - spec.kernel_height + 1
    ow = x.shape[3] - spec.kernel_width + 1
    win = sliding_window_view(x, (spec.kernel_height, spec.kernel_width), axis=(2, 3))
    # (b, c, oh, ow, kh, kw) -> (c, kh, kw, b, oh, ow): rows are shifted image planes
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * spec.kernel_height * spec.kernel_width, b * oh * ow)
    return cols, oh, ow


def _im2col_nhwc(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Unfold ``x`` into a (batch*oh*ow, kh*kw*C) matrix with channels innermost."""
    p = spec.padding
    xp = np.pad(x.transpose(0, 2, 3, 1), ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (spec.kernel_height, spec.kernel_width), axis=(1, 2))
    b, oh, ow = win.shape[:3]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * oh * ow, -1)


def _is_pointwise(spec: ConvSpec) -> bool:
    return spec.kernel_height == 1 and spec.kernel_width == 1 and spec.padding == 0


def _use_nhwc(spec: ConvSpec) -> bool:
    # channel-innermost unfolding pays off once each gathered run is a few floats long
    return spec.in_channels >= 4


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: Optional[np.ndarray], spec: ConvSpec) -> np.ndarray:
    """Cross-correlate ``x`` with ``weights`` and add a per-channel ``bias``.

    Parameters
    ----------
    x : ndarray, shape (B, C_in, H, W)
    weights : ndarray, shape (C_out, C_in, kh, kw)
    bias : ndarray of shape (C_out,) or None
    spec : ConvSpec

    Returns
    -------
    ndarray, shape (B, C_out, H + 2p - kh + 1, W + 2p - kw + 1)
    """
    _check_conv_shapes(x, weights, spec)
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ValueError(f"bias shape {bias.shape} does not match {spec.out_channels} output channels")
    b, _, h, w = x.shape
    oh, ow = spec.output_size(h, w)
    if _is_pointwise(spec):
        out = np.matmul(weights[:, :, 0, 0], x.reshape(b, spec.in_channels, h * w))
        out = out.reshape(b, spec.out_channels, oh, ow)
    elif _use_nhwc(spec):
        cols = _im2col_nhwc(x, spec)
        out = cols @ weights.transpose(0, 2, 3, 1).reshape(spec.out_channels, -1).T
        out = np.ascontiguousarray(out.reshape(b, oh, ow, spec.out_channels).transpose(0, 3, 1, 2))
    else:
        cols, _, _ = _im2col(x, spec)
        out = weights.reshape(spec.out_channels, -1) @ cols
        out = np.ascontiguousarray(out.reshape(spec.out_channels, b, oh, ow).transpose(1, 0, 2, 3))
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1)
    return out


def _conv_transpose_input(grad_out: np.ndarray, weights: np.ndarray, spec: ConvSpec, h: int, w: int) -> np.ndarray:
    """Input gradient as a valid correlation of the re-padded ``grad_out`` with the flipped kernel."""
    kh, kw, p = spec.kernel_height, spec.kernel_width, spec.padding
    qh, qw = kh - 1 - p, kw - 1 - p
    g = np.pad(grad_out, ((0, 0), (0, 0), (qh, qh), (qw, qw)))
    flipped = np.ascontiguousarray(weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    tspec = ConvSpec(spec.out_channels, spec.in_channels, kh, kw, padding=0)
    return conv2d_forward(g, flipped, None, tspec)


def _col2im_input(g2: np.ndarray, weights: np.ndarray, spec: ConvSpec, shape, oh: int, ow: int) -> np.ndarray:
    b, c, h, w = shape
    kh, kw, p = spec.kernel_height, spec.kernel_width, spec.padding
    gcols = (weights.reshape(spec.out_channels, -1).T @ g2).reshape(c, kh, kw, b, oh, ow)
    gpad = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gpad[:, :, i : i + oh, j : j + ow] += gcols[:, i, j].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(gpad[:, :, p : p + h, p : p + w])


def conv2d_backward(
    grad_out: np.ndarray,
    saved_input: np.ndarray,
    weights: np.ndarray,
    spec: ConvSpec,
    input_grad: bool = True,
) -> Tuple[Optional[np.ndarray], np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d_forward` w.r.t. input, weights and bias.

    ``grad_input`` is ``None`` when ``input_grad`` is False (first layers
    never need it).
    """
    _check_conv_shapes(saved_input, weights, spec)
    b, c, h, w = saved_input.shape
    oh, ow = spec.output_size(h, w)
    if grad_out.shape != (b, spec.out_channels, oh, ow):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match forward output shape {(b, spec.out_channels, oh, ow)}")

    grad_bias = grad_out.sum(axis=(0, 2, 3))
    if _is_pointwise(spec):
        g = grad_out.reshape(b, spec.out_channels, oh * ow)
        xs = saved_input.reshape(b, c, h * w)
        grad_w = np.matmul(g, xs.transpose(0, 2, 1)).sum(axis=0).reshape(spec.weight_shape)
        grad_x = None
        if input_grad:
            grad_x = np.matmul(weights[:, :, 0, 0].T, g).reshape(saved_input.shape)
        return grad_x, grad_w, grad_bias

    kh, kw = spec.kernel_height, spec.kernel_width
    if _use_nhwc(spec):
        g_rows = grad_out.transpose(0, 2, 3, 1).reshape(b * oh * ow, spec.out_channels)
        cols = _im2col_nhwc(saved_input, spec)
        grad_w = np.ascontiguousarray((g_rows.T @ cols).reshape(spec.out_channels, kh, kw, c).transpose(0, 3, 1, 2))
    else:
        g2 = grad_out.transpose(1, 0, 2, 3).reshape(spec.out_channels, b * oh * ow)
        cols, _, _ = _im2col(saved_input, spec)
        grad_w = (g2 @ cols.T).reshape(spec.weight_shape)
    grad_x = None
    if input_grad:
        can_transpose = spec.padding <= min(kh, kw) - 1
        if can_transpose and spec.out_channels <= spec.in_channels:
            grad_x = _conv_transpose_input(grad_out, weights, spec, h, w)
        else:
            g2 = grad_out.transpose(1, 0, 2, 3).reshape(spec.out_channels, b * oh * ow)
            grad_x = _col2im_input(g2, weights, spec, saved_input.shape, oh, ow)
    return grad_x, grad_w, grad_bias


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, saved_input: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return grad_out * (saved_input > 0)


def _check_thresholds(x: np.ndarray, thresholds: np.ndarray) -> None:
    _check_rank4("soft_shrink input", x)
    if thresholds.shape != (x.shape[1],):
        raise ValueError(f"thresholds shape {thresholds.shape} does not match {x.shape[1]} channels")
    if not np.all(thresholds > 0):
        raise ValueError(f"thresholds must be positive, got minimum {thresholds.min()}")


def soft_shrink(x: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """``sign(x) * max(|x| - theta_c, 0)`` with one threshold per channel."""
    _check_thresholds(x, thresholds)
    t = thresholds.reshape(1, -1, 1, 1).astype(x.dtype, copy=False)
    return np.sign(x) * np.maximum(np.abs(x) - t, 0)


def soft_shrink_backward(
    grad_out: np.ndarray, saved_input: np.ndarray, thresholds: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Return ``(grad_input, grad_thresholds)``; zero subgradient at ``|x| = theta``."""
    _check_thresholds(saved_input, thresholds)
    t = thresholds.reshape(1, -1, 1, 1).astype(saved_input.dtype, copy=False)
    active = np.abs(saved_input) > t
    grad_x = grad_out * active
    grad_t = -(grad_x * np.sign(saved_input)).sum(axis=(0, 2, 3))
    return grad_x, grad_t


def pointwise_mul_sum(weight_maps: np.ndarray, estimates: Sequence[np.ndarray]) -> np.ndarray:
    """Gated aggregation ``sum_i W_i * F_i``, accumulated in ascending expert order."""
    _check_rank4("weight_maps", weight_maps)
    n = weight_maps.shape[1]
    if len(estimates) != n:
        raise ValueError(f"{len(estimates)} estimates given for {n} weight-map channels")
    b, _, h, w = weight_maps.shape
    out = np.zeros((b, 1, h, w), dtype=np.result_type(weight_maps, *estimates))
    for i, est in enumerate(estimates):
        if est.shape != (b, 1, h, w):
            raise ValueError(f"estimate {i} has shape {est.shape}, expected {(b, 1, h, w)}")
        out += weight_maps[:, i : i + 1] * est
    return out


def pointwise_mul_sum_backward(
    grad_out: np.ndarray, weight_maps: np.ndarray, estimates: Sequence[np.ndarray]
) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Return ``(grad_weight_maps, [grad_estimate_i])``."""
    b, n, h, w = weight_maps.shape
    if grad_out.shape != (b, 1, h, w):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match {(b, 1, h, w)}")
    grad_maps = np.concatenate([grad_out * est for est in estimates], axis=1)
    grad_est = [grad_out * weight_maps[:, i : i + 1] for i in range(n)]
    return grad_maps, grad_est


def mse_loss(prediction: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean squared error over all elements, and its gradient."""
    if prediction.shape != target.shape:
        raise ValueError(f"prediction shape {prediction.shape} does not match target shape {target.shape}")
    diff = prediction - target
    loss = float(np.mean(np.square(diff, dtype=np.float64)))
    return loss, (2.0 / diff.size) * diff


def softmax_channels(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_channels_backward(grad_out: np.ndarray, saved_output: np.ndarray) -> np.ndarray:
    dot = (grad_out * saved_output).sum(axis=1, keepdims=True)
    return saved_output * (grad_out - dot)


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    """Normalized max error per parameter group.

    The error of a group is ``max|analytic - numeric| / max(|analytic|, |numeric|)``
    taken over the checked coordinates, so tiny gradient entries do not blow
    up the ratio in 32-bit mode.
    """

    errors: Dict[str, float]
    tolerance: float
    dtype: np.dtype
    checked: Dict[str, int] = field(default_factory=dict)
    skipped: Dict[str, int] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def __str__(self) -> str:
        lines = [f"gradient check ({np.dtype(self.dtype).name}, tol {self.tolerance:g}): {'PASS' if self.passed else 'FAIL'}"]
        for name, err in self.errors.items():
            skip = self.skipped.get(name, 0)
            note = f"  ({skip} kink-crossing coords skipped)" if skip else ""
            lines.append(f"  {name:<28s} {err:.3e}{note}")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric))) / scale


def _sum_squares(out: np.ndarray) -> float:
    return float(np.sum(np.square(out, dtype=np.float64)))


def gradient_check(
    fragment,
    x: np.ndarray,
    tolerance: float = 1e-2,
    step: float = 1e-3,
    dtype=np.float32,
    max_coords: Optional[int] = None,
    check_input: bool = True,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backprop against central differences of ``L = sum(out**2)``.

    ``fragment`` must provide ``parameters() -> dict[str, Parameter]``,
    ``forward(x) -> out`` (caching activations), ``backward(grad_out) ->
    grad_x`` (accumulating into ``Parameter.grad``) and ``astype(dtype)``.
    ``max_coords`` caps the number of randomly chosen coordinates checked
    per group; ``None`` checks every entry.

    If the fragment has a ``kink_signature()`` method (the on/off state of
    every ReLU or shrinkage unit after the last forward), coordinates whose
    perturbation flips any unit are skipped: central differences are not
    valid across a kink.
    """
    frag = fragment.astype(dtype)
    x = np.asarray(x, dtype=dtype).copy()
    params = frag.parameters()
    for p in params.values():
        p.zero_grad()
    out = frag.forward(x)
    grad_x = frag.backward((2 * out).astype(dtype))
    rng = np.random.default_rng(seed)
    signature = getattr(frag, "kink_signature", None)
    base_sig = signature() if signature is not None else None

    def coords(size: int) -> Iterable[int]:
        if max_coords is None or size <= max_coords:
            return range(size)
        return np.sort(rng.choice(size, size=max_coords, replace=False))

    def crossed() -> bool:
        return base_sig is not None and not np.array_equal(signature(), base_sig)

    def numeric(arr: np.ndarray, idx: Iterable[int]) -> Tuple[np.ndarray, np.ndarray]:
        flat = arr.reshape(-1)
        res, keep = [], []
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            hi = flat[i]
            lp = _sum_squares(frag.forward(x))
            bad = crossed()
            flat[i] = orig - step
            lo = flat[i]
            lm = _sum_squares(frag.forward(x))
            bad = bad or crossed()
            flat[i] = orig
            res.append((lp - lm) / float(hi - lo))
            keep.append(not bad)
        return np.array(res), np.array(keep, dtype=bool)

    errors: Dict[str, float] = {}
    checked: Dict[str, int] = {}
    skipped: Dict[str, int] = {}

    def record(name: str, analytic: np.ndarray, values: np.ndarray) -> None:
        idx = np.fromiter(coords(values.size), dtype=np.int64)
        num, keep = numeric(values, idx)
        errors[name] = relative_error(analytic.reshape(-1)[idx][keep].astype(np.float64), num[keep])
        checked[name] = int(keep.sum())
        skipped[name] = int((~keep).sum())

    for name, p in params.items():
        record(name, p.grad, p.value)
    if check_input and grad_x is not None:
        record("input", grad_x, x)
    return GradCheckReport(errors=errors, tolerance=tolerance, dtype=np.dtype(dtype), checked=checked, skipped=skipped)


class Module:
    """Base for anything that owns named :class:`Parameter` objects."""

    def parameters(self) -> Dict[str, Parameter]:
        raise NotImplementedError

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def clear_cache(self) -> None:
        pass

    def astype(self, dtype):
        """Deep copy with every parameter cast to ``dtype`` and fresh gradients."""
        self.clear_cache()
        clone = copy.deepcopy(self)
        for p in clone.parameters().values():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
            p.momentum = p.momentum.astype(dtype)
        return clone


class ConvLayer(Module):
    """A convolution with weight and optional bias parameters.

    Also serves as a minimal fragment for :func:`gradient_check`.
    """

    def __init__(self, spec: ConvSpec, weight: np.ndarray, bias: Optional[np.ndarray] = None, lr_scale: float = 1.0):
        if weight.shape != spec.weight_shape:
            raise ValueError(f"weight shape {weight.shape} does not match {spec.weight_shape}")
        self.spec = spec
        self.weight = Parameter(weight, lr_scale=lr_scale)
        self.bias = Parameter(bias, lr_scale=lr_scale) if bias is not None else None
        self._x: Optional[np.ndarray] = None

    def parameters(self) -> Dict[str, Parameter]:
        params = {"weight": self.weight}
        if self.bias is not None:
            params["bias"] = self.bias
        return params

    def clear_cache(self) -> None:
        self._x = None

    def kink_signature(self) -> np.ndarray:
        return np.zeros(0, dtype=bool)

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        if cache:
            self._x = x
        return conv2d_forward(x, self.weight.value, None if self.bias is None else self.bias.value, self.spec)

    def backward(self, grad_out: np.ndarray, input_grad: bool = True) -> Optional[np.ndarray]:
        if self._x is None:
            raise RuntimeError("backward called without a cached forward pass")
        gx, gw, gb = conv2d_backward(grad_out, self._x, self.weight.value, self.spec, input_grad=input_grad)
        self.weight.grad += gw
        if self.bias is not None:
            self.bias.grad += gb
        return gx
