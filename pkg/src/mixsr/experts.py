"""Super-resolution inference networks used as mixture experts.

Both expert kinds map a single-channel, bicubic-upscaled luminance batch
``(B, 1, H, W)`` to an HR estimate of the same size.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional, Union

import numpy as np

from .tensor_ops import (
    ConvLayer,
    ConvSpec,
    Module,
    Parameter,
    conv2d_backward,
    conv2d_forward,
    relu,
    relu_backward,
    soft_shrink,
    soft_shrink_backward,
)

THRESHOLD_FLOOR = 1e-6
RECON_INIT_STD = 1e-3


def _check_config_fields(cls, values: dict) -> None:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} field(s): {', '.join(unknown)}")


@dataclass(frozen=True)
class ScnConfig:
    """Shape of a sparse-coding network expert.

    ``dict_size`` is the number of sparse-code channels (the capacity knob),
    ``lista_stages`` the number of unrolled shrinkage stages.
    """

    dict_size: int = 128
    lista_stages: int = 3
    feature_channels: int = 100
    feature_kernel: int = 9
    recon_kernel: int = 5
    residual: bool = True
    threshold_init: float = 0.1

    def __post_init__(self):
        if not 8 <= self.dict_size <= 1024:
            raise ValueError(f"dict_size must lie in [8, 1024], got {self.dict_size}")
        if self.lista_stages < 1:
            raise ValueError(f"lista_stages must be >= 1, got {self.lista_stages}")
        if self.feature_channels < 1:
            raise ValueError(f"feature_channels must be >= 1, got {self.feature_channels}")
        for name in ("feature_kernel", "recon_kernel"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ValueError(f"{name} must be a positive odd integer, got {k}")
        if not self.threshold_init > 0:
            raise ValueError(f"threshold_init must be positive, got {self.threshold_init}")

    @classmethod
    def from_dict(cls, values: dict) -> "ScnConfig":
        _check_config_fields(cls, values)
        return cls(**values)


@dataclass(frozen=True)
class SrcnnConfig:
    """Three-layer SRCNN: ``1 -> channels1 -> channels2 -> 1``."""

    channels1: int = 64
    channels2: int = 32
    kernel1: int = 9
    kernel2: int = 1
    kernel3: int = 5

    def __post_init__(self):
        for name in ("channels1", "channels2"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("kernel1", "kernel2", "kernel3"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ValueError(f"{name} must be a positive odd integer, got {k}")

    @classmethod
    def from_dict(cls, values: dict) -> "SrcnnConfig":
        _check_config_fields(cls, values)
        return cls(**values)


class ScnExpert(Module):
    """Feature extraction, unrolled LISTA sparse coding and linear reconstruction.

    ``f = feature(y)``, ``z_0 = shrink(W f)``,
    ``z_t = shrink(W f + S z_{t-1})``, ``out = recon(z_{k-1}) [+ y]``.
    The code layers ``W`` and ``S`` are bias-free 1x1 convolutions; the
    lateral layer exists only when ``lista_stages > 1``.
    """

    kind = "scn"

    def __init__(self, config: ScnConfig, rng: Optional[np.random.Generator] = None, dtype=np.float32):
        rng = np.random.default_rng(0) if rng is None else rng
        self.config = config
        m, n = config.feature_channels, config.dict_size
        self.feature = _he_layer(ConvSpec.same(1, m, config.feature_kernel), rng, dtype, bias=True)
        self.code_init = _he_layer(ConvSpec(m, n, 1, 1), rng, dtype, bias=False)
        self.lateral = _he_layer(ConvSpec(n, n, 1, 1), rng, dtype, bias=False) if config.lista_stages > 1 else None
        self.thresholds = Parameter(np.full(n, config.threshold_init, dtype=dtype))
        self.recon = _small_layer(ConvSpec.same(n, 1, config.recon_kernel), rng, dtype)
        self._cache: Optional[dict] = None

    def parameters(self) -> Dict[str, Parameter]:
        params = {
            "feature.weight": self.feature.weight,
            "feature.bias": self.feature.bias,
            "code_init.weight": self.code_init.weight,
        }
        if self.lateral is not None:
            params["lateral.weight"] = self.lateral.weight
        params["thresholds"] = self.thresholds
        params["recon.weight"] = self.recon.weight
        params["recon.bias"] = self.recon.bias
        return params

    def clear_cache(self) -> None:
        self._cache = None
        for layer in (self.feature, self.code_init, self.lateral, self.recon):
            if layer is not None:
                layer.clear_cache()

    def kink_signature(self) -> np.ndarray:
        theta = self.thresholds.value.reshape(1, -1, 1, 1)
        return np.concatenate([(np.abs(u) > theta).ravel() for u in self._cache["pre"]])

    def clamp(self) -> None:
        np.maximum(self.thresholds.value, THRESHOLD_FLOOR, out=self.thresholds.value)

    def forward(self, y: np.ndarray, cache: bool = True) -> np.ndarray:
        theta = self.thresholds.value
        f = self.feature.forward(y, cache)
        wf = self.code_init.forward(f, cache)
        pre = [wf]
        codes = [soft_shrink(wf, theta)]
        for _ in range(1, self.config.lista_stages):
            u = wf + conv2d_forward(codes[-1], self.lateral.weight.value, None, self.lateral.spec)
            pre.append(u)
            codes.append(soft_shrink(u, theta))
        out = self.recon.forward(codes[-1], cache)
        if self.config.residual:
            out += y
        if cache:
            self._cache = {"pre": pre, "codes": codes}
        return out

    def backward(self, grad_out: np.ndarray, input_grad: bool = True) -> Optional[np.ndarray]:
        if self._cache is None:
            raise RuntimeError("ScnExpert.backward called without a cached forward pass")
        pre, codes = self._cache["pre"], self._cache["codes"]
        theta = self.thresholds.value
        g_code = self.recon.backward(grad_out)
        g_wf = None
        for t in range(len(pre) - 1, -1, -1):
            g_u, g_theta = soft_shrink_backward(g_code, pre[t], theta)
            self.thresholds.grad += g_theta
            g_wf = g_u if g_wf is None else g_wf + g_u
            if t > 0:
                g_code, g_s, _ = conv2d_backward(g_u, codes[t - 1], self.lateral.weight.value, self.lateral.spec)
                self.lateral.weight.grad += g_s
        g_f = self.code_init.backward(g_wf)
        g_y = self.feature.backward(g_f, input_grad=input_grad)
        if not input_grad:
            return None
        if self.config.residual:
            g_y = g_y + grad_out
        return g_y


class SrcnnExpert(Module):
    """``conv(k1) -> ReLU -> conv(k2) -> ReLU -> conv(k3)``, all size-preserving."""

    kind = "srcnn"

    def __init__(self, config: SrcnnConfig, rng: Optional[np.random.Generator] = None, dtype=np.float32):
        rng = np.random.default_rng(0) if rng is None else rng
        self.config = config
        self.conv1 = _he_layer(ConvSpec.same(1, config.channels1, config.kernel1), rng, dtype, bias=True)
        self.conv2 = _he_layer(ConvSpec.same(config.channels1, config.channels2, config.kernel2), rng, dtype, bias=True)
        self.conv3 = _small_layer(ConvSpec.same(config.channels2, 1, config.kernel3), rng, dtype)
        self._cache: Optional[List[np.ndarray]] = None

    def parameters(self) -> Dict[str, Parameter]:
        return {
            "conv1.weight": self.conv1.weight,
            "conv1.bias": self.conv1.bias,
            "conv2.weight": self.conv2.weight,
            "conv2.bias": self.conv2.bias,
            "conv3.weight": self.conv3.weight,
            "conv3.bias": self.conv3.bias,
        }

    def clear_cache(self) -> None:
        self._cache = None
        for layer in (self.conv1, self.conv2, self.conv3):
            layer.clear_cache()

    def clamp(self) -> None:
        pass

    def kink_signature(self) -> np.ndarray:
        return np.concatenate([(a > 0).ravel() for a in self._cache])

    def forward(self, y: np.ndarray, cache: bool = True) -> np.ndarray:
        a1 = self.conv1.forward(y, cache)
        a2 = self.conv2.forward(relu(a1), cache)
        out = self.conv3.forward(relu(a2), cache)
        if cache:
            self._cache = [a1, a2]
        return out

    def backward(self, grad_out: np.ndarray, input_grad: bool = True) -> Optional[np.ndarray]:
        if self._cache is None:
            raise RuntimeError("SrcnnExpert.backward called without a cached forward pass")
        a1, a2 = self._cache
        g = relu_backward(self.conv3.backward(grad_out), a2)
        g = relu_backward(self.conv2.backward(g), a1)
        return self.conv1.backward(g, input_grad=input_grad)


Expert = Union[ScnExpert, SrcnnExpert]

EXPERT_KINDS = {"scn": (ScnExpert, ScnConfig), "srcnn": (SrcnnExpert, SrcnnConfig)}


def _he_layer(spec: ConvSpec, rng: np.random.Generator, dtype, bias: bool) -> ConvLayer:
    fan_in = spec.in_channels * spec.kernel_height * spec.kernel_width
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=spec.weight_shape).astype(dtype)
    return ConvLayer(spec, w, np.zeros(spec.out_channels, dtype=dtype) if bias else None)


def _small_layer(spec: ConvSpec, rng: np.random.Generator, dtype) -> ConvLayer:
    w = rng.normal(0.0, RECON_INIT_STD, size=spec.weight_shape).astype(dtype)
    return ConvLayer(spec, w, np.zeros(spec.out_channels, dtype=dtype))


def make_expert(kind: str, config=None, seed: Union[int, np.random.Generator] = 0) -> Expert:
    """Build an expert with seeded Gaussian initialization.

    ``config`` may be a config dataclass, a plain dict of its fields, or
    ``None`` for the defaults.
    """
    if kind not in EXPERT_KINDS:
        raise ValueError(f"unknown expert kind {kind!r}; expected one of {sorted(EXPERT_KINDS)}")
    cls, cfg_cls = EXPERT_KINDS[kind]
    if config is None:
        config = cfg_cls()
    elif isinstance(config, dict):
        config = cfg_cls.from_dict(config)
    elif not isinstance(config, cfg_cls):
        raise TypeError(f"config for kind {kind!r} must be {cfg_cls.__name__}, got {type(config).__name__}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return cls(config, rng)


def expert_config_dict(expert: Expert) -> dict:
    return asdict(expert.config)
