"""scikit-learn compatible wrapper around mixture training and inference."""

from __future__ import annotations

from typing import List, Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .experts import EXPERT_KINDS
from .imaging import PlanarImage
from .mixture import MixtureNetwork, WeightModuleConfig, make_mixture
from .model_store import load_model, save_model
from .pipeline import super_resolve
from .training import TrainConfig, train, validate


def check_image(x, name: str = "image") -> PlanarImage:
    """Coerce an array or :class:`PlanarImage` to a validated ``PlanarImage``.

    Arrays must be ``(H, W)`` or ``(H, W, 3)`` with finite values in [0, 1].
    """
    if isinstance(x, PlanarImage):
        return x
    a = np.asarray(x)
    if a.dtype == object or not np.issubdtype(a.dtype, np.number):
        raise ValueError(f"{name} must be numeric, got dtype {a.dtype}")
    if a.ndim not in (2, 3) or (a.ndim == 3 and a.shape[2] != 3):
        raise ValueError(f"{name} must have shape (H, W) or (H, W, 3), got {a.shape}")
    if a.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    if a.min() < 0 or a.max() > 1:
        raise ValueError(f"{name} values must lie in [0, 1]; got range [{a.min()}, {a.max()}]")
    return PlanarImage(a)


def check_images(X, name: str = "X") -> List[PlanarImage]:
    """Validate a non-empty sequence of images (a single 2-D array is not a sequence)."""
    if isinstance(X, (PlanarImage, np.ndarray)) and not (isinstance(X, np.ndarray) and X.ndim == 4):
        raise ValueError(f"{name} must be a sequence of images, not a single image")
    images = [check_image(x, f"{name}[{i}]") for i, x in enumerate(X)]
    if not images:
        raise ValueError(f"{name} is empty")
    return images


class MixtureSR(BaseEstimator, TransformerMixin):
    """Mixture-of-experts super-resolution estimator.

    ``fit`` takes high-resolution training images, ``predict``/``transform``
    upscale low-resolution images by ``scale`` and ``score`` returns the mean
    PSNR gain (dB) over bicubic on held-out high-resolution images.
    """

    def __init__(
        self,
        n_experts: int = 2,
        expert_kind: str = "scn",
        dict_size: int = 64,
        lista_stages: int = 3,
        feature_channels: int = 100,
        gate: str = "linear",
        scale: int = 2,
        max_iter: int = 1000,
        batch_size: int = 64,
        patch_size: int = 56,
        learning_rate: float = 1e-5,
        momentum: float = 0.9,
        augment: bool = True,
        random_state: int = 0,
    ):
        self.n_experts = n_experts
        self.expert_kind = expert_kind
        self.dict_size = dict_size
        self.lista_stages = lista_stages
        self.feature_channels = feature_channels
        self.gate = gate
        self.scale = scale
        self.max_iter = max_iter
        self.batch_size = batch_size
        self.patch_size = patch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.augment = augment
        self.random_state = random_state

    def _expert_config(self):
        if self.expert_kind not in EXPERT_KINDS:
            raise ValueError(f"expert_kind must be one of {sorted(EXPERT_KINDS)}, got {self.expert_kind!r}")
        if self.expert_kind == "scn":
            return dict(dict_size=self.dict_size, lista_stages=self.lista_stages, feature_channels=self.feature_channels)
        return {}

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            patch_size=self.patch_size,
            lr_experts=self.learning_rate,
            lr_weight_module=self.learning_rate,
            momentum=self.momentum,
            max_iterations=self.max_iter,
            scale=self.scale,
            seed=self.random_state,
            augment_dihedral=self.augment,
            augment_scales=(0.9, 0.8, 0.7, 0.6) if self.augment else (),
            log_every=0,
        )

    def fit(self, X, y=None):
        images = check_images(X)
        cfg = self._train_config()
        net = make_mixture(
            self.n_experts,
            self.expert_kind,
            self._expert_config(),
            seed=self.random_state,
            weight_config=WeightModuleConfig(gate=self.gate),
        )
        state = train(net, images, cfg)
        self._set_network(net)
        self.n_iter_ = state.iteration
        self.loss_curve_ = [h[1] for h in state.history]
        return self

    def _set_network(self, net: MixtureNetwork) -> None:
        self.network_ = net
        self.n_experts_ = net.n_experts

    def predict(self, X) -> List[np.ndarray]:
        """Upscale each image by ``scale``; colour inputs keep their chrominance."""
        check_is_fitted(self, "network_")
        return [super_resolve(self.network_, img, self.scale).data for img in check_images(X)]

    def transform(self, X) -> List[np.ndarray]:
        return self.predict(X)

    def score(self, X, y=None) -> float:
        check_is_fitted(self, "network_")
        mean = validate(self.network_, check_images(X), self.scale)[-1]
        return mean.psnr - mean.bicubic_psnr

    def save(self, path) -> None:
        check_is_fitted(self, "network_")
        save_model(self.network_, path)

    @classmethod
    def from_model(cls, path, scale: Optional[int] = None) -> "MixtureSR":
        """Wrap a stored model; hyperparameters that shape the network are read from it."""
        net = load_model(path)
        first = net.experts[0]
        params = dict(n_experts=net.n_experts, expert_kind=first.kind, scale=scale or int(net.metadata.get("scale", 2)))
        if first.kind == "scn":
            params.update(
                dict_size=first.config.dict_size,
                lista_stages=first.config.lista_stages,
                feature_channels=first.config.feature_channels,
            )
        if net.weight_module is not None:
            params["gate"] = net.weight_module.config.gate
        est = cls(**params)
        est._set_network(net)
        return est

