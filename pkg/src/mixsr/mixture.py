"""Adaptive weight module and the gated mixture of experts."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .experts import RECON_INIT_STD, Expert, _he_layer, make_expert
from .tensor_ops import (
    ConvLayer,
    ConvSpec,
    Module,
    Parameter,
    pointwise_mul_sum,
    pointwise_mul_sum_backward,
    relu,
    relu_backward,
    softmax_channels,
    softmax_channels_backward,
)

GATES = ("linear", "relu", "softmax")


@dataclass(frozen=True)
class WeightModuleConfig:
    """Three size-preserving convolutions ``1 -> width1 -> width2 -> N``.

    ``gate`` selects what follows the last layer: ``linear`` (default, no
    activation), ``relu``, or a per-pixel ``softmax`` across experts.
    """

    width1: int = 32
    width2: int = 16
    kernel: int = 5
    gate: str = "linear"

    def __post_init__(self):
        if self.width1 < 1 or self.width2 < 1:
            raise ValueError(f"weight module widths must be >= 1, got {self.width1}, {self.width2}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be a positive odd integer, got {self.kernel}")
        if self.gate not in GATES:
            raise ValueError(f"gate must be one of {GATES}, got {self.gate!r}")

    @classmethod
    def from_dict(cls, values: dict) -> "WeightModuleConfig":
        unknown = sorted(set(values) - {f.name for f in fields(cls)})
        if unknown:
            raise ValueError(f"unknown WeightModuleConfig field(s): {', '.join(unknown)}")
        return cls(**values)


class WeightModule(Module):
    """Predicts one per-pixel weight map per expert from the upscaled input."""

    def __init__(self, n_experts: int, config: WeightModuleConfig = WeightModuleConfig(),
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        if n_experts < 1:
            raise ValueError(f"n_experts must be >= 1, got {n_experts}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.n_experts = n_experts
        self.config = config
        k = config.kernel
        self.conv1 = _he_layer(ConvSpec.same(1, config.width1, k), rng, dtype, bias=True)
        self.conv2 = _he_layer(ConvSpec.same(config.width1, config.width2, k), rng, dtype, bias=True)
        spec3 = ConvSpec.same(config.width2, n_experts, k)
        w3 = rng.normal(0.0, RECON_INIT_STD, size=spec3.weight_shape).astype(dtype)
        # symmetric start: every gate ~ 1/N
        self.conv3 = ConvLayer(spec3, w3, np.full(n_experts, 1.0 / n_experts, dtype=dtype))
        self._cache: Optional[Tuple[np.ndarray, ...]] = None

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

    def forward(self, y: np.ndarray, cache: bool = True) -> np.ndarray:
        a1 = self.conv1.forward(y, cache)
        a2 = self.conv2.forward(relu(a1), cache)
        a3 = self.conv3.forward(relu(a2), cache)
        gate = self.config.gate
        if gate == "linear":
            maps = a3
        elif gate == "relu":
            maps = relu(a3)
        else:
            maps = softmax_channels(a3)
        if cache:
            self._cache = (a1, a2, a3, maps)
        return maps

    def kink_signature(self) -> np.ndarray:
        a1, a2, a3, _ = self._cache
        acts = [a1, a2, a3] if self.config.gate == "relu" else [a1, a2]
        return np.concatenate([(a > 0).ravel() for a in acts])

    def backward(self, grad_maps: np.ndarray, input_grad: bool = True) -> Optional[np.ndarray]:
        if self._cache is None:
            raise RuntimeError("WeightModule.backward called without a cached forward pass")
        a1, a2, a3, maps = self._cache
        gate = self.config.gate
        if gate == "relu":
            grad_maps = relu_backward(grad_maps, a3)
        elif gate == "softmax":
            grad_maps = softmax_channels_backward(grad_maps, maps)
        g = relu_backward(self.conv3.backward(grad_maps), a2)
        g = relu_backward(self.conv2.backward(g), a1)
        return self.conv1.backward(g, input_grad=input_grad)


class MixtureNetwork(Module):
    """``hr = sum_i W_i(y) * F_i(y)`` over N experts.

    With a single expert and no weight module the gate is implicitly all
    ones and the network is numerically the bare expert.
    """

    def __init__(self, experts: Sequence[Expert], weight_module: Optional[WeightModule] = None):
        experts = list(experts)
        if not experts:
            raise ValueError("a mixture needs at least one expert")
        if weight_module is None and len(experts) != 1:
            raise ValueError(f"{len(experts)} experts need an explicit weight module")
        if weight_module is not None and weight_module.n_experts != len(experts):
            raise ValueError(
                f"weight module emits {weight_module.n_experts} maps for {len(experts)} experts"
            )
        self.experts: List[Expert] = experts
        self.weight_module = weight_module
        self.metadata: Dict[str, object] = {}
        self._cache: Optional[Tuple[np.ndarray, List[np.ndarray]]] = None

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def implicit_gate(self) -> bool:
        return self.weight_module is None

    def parameters(self) -> Dict[str, Parameter]:
        params: Dict[str, Parameter] = {}
        for i, expert in enumerate(self.experts):
            for name, p in expert.parameters().items():
                params[f"expert{i}.{name}"] = p
        if self.weight_module is not None:
            for name, p in self.weight_module.parameters().items():
                params[f"gate.{name}"] = p
        return params

    def clear_cache(self) -> None:
        self._cache = None
        for e in self.experts:
            e.clear_cache()
        if self.weight_module is not None:
            self.weight_module.clear_cache()

    def clamp(self) -> None:
        for e in self.experts:
            e.clamp()

    def kink_signature(self) -> np.ndarray:
        parts = [e.kink_signature() for e in self.experts]
        if self.weight_module is not None:
            parts.append(self.weight_module.kink_signature())
        return np.concatenate(parts)

    def forward_all(self, y: np.ndarray, cache: bool = True) -> Tuple[np.ndarray, np.ndarray, List[np.ndarray]]:
        """Return ``(hr, weight_maps, estimates)``."""
        estimates = [e.forward(y, cache) for e in self.experts]
        if self.weight_module is None:
            maps = np.ones_like(estimates[0])
            hr = estimates[0]
        else:
            maps = self.weight_module.forward(y, cache)
            hr = pointwise_mul_sum(maps, estimates)
        if cache:
            self._cache = (maps, estimates)
        return hr, maps, estimates

    def forward(self, y: np.ndarray, cache: bool = True) -> np.ndarray:
        return self.forward_all(y, cache)[0]

    def backward(self, grad_hr: np.ndarray, input_grad: bool = True) -> Optional[np.ndarray]:
        if self._cache is None:
            raise RuntimeError("MixtureNetwork.backward called without a cached forward pass")
        if self.weight_module is None:
            return self.experts[0].backward(grad_hr, input_grad)
        maps, estimates = self._cache
        grad_maps, grad_est = pointwise_mul_sum_backward(grad_hr, maps, estimates)
        grads = [e.backward(g, input_grad) for e, g in zip(self.experts, grad_est)]
        grads.append(self.weight_module.backward(grad_maps, input_grad))
        if not input_grad:
            return None
        total = grads[0]
        for g in grads[1:]:
            total = total + g
        return total

    def predict(self, y: np.ndarray, batch_size: int = 1) -> np.ndarray:
        """Inference over a batch without touching activation caches."""
        outs = [self.forward(y[i : i + batch_size], cache=False) for i in range(0, y.shape[0], batch_size)]
        return np.concatenate(outs, axis=0)


def mixture_forward(net: MixtureNetwork, y: np.ndarray):
    return net.forward_all(y)


def mixture_backward(net: MixtureNetwork, grad_hr: np.ndarray) -> None:
    net.backward(grad_hr, input_grad=False)


def make_mixture(
    n_experts: int,
    kind: str = "scn",
    expert_config=None,
    seed: int = 0,
    weight_config: Optional[WeightModuleConfig] = None,
    implicit_single_gate: bool = True,
) -> MixtureNetwork:
    """Build N identically-configured experts plus a weight module from one seed."""
    if n_experts < 1:
        raise ValueError(f"n_experts must be >= 1, got {n_experts}")
    rng = np.random.default_rng(seed)
    experts = [make_expert(kind, expert_config, rng) for _ in range(n_experts)]
    if n_experts == 1 and implicit_single_gate:
        return MixtureNetwork(experts)
    if isinstance(weight_config, dict):
        weight_config = WeightModuleConfig.from_dict(weight_config)
    return MixtureNetwork(experts, WeightModule(n_experts, weight_config or WeightModuleConfig(), rng))


def max_label_map(weight_maps: np.ndarray) -> np.ndarray:
    """Per-pixel index of the largest weight; ties go to the lowest index.

    Accepts ``(N, H, W)`` or ``(B, N, H, W)`` maps.
    """
    weight_maps = np.asarray(weight_maps)
    if weight_maps.ndim not in (3, 4):
        raise ValueError(f"weight maps must be (N, H, W) or (B, N, H, W), got {weight_maps.shape}")
    axis = 0 if weight_maps.ndim == 3 else 1
    return np.argmax(weight_maps, axis=axis)


def weight_module_config_dict(wm: WeightModule) -> dict:
    return asdict(wm.config)
