"""Joint SGD training of the mixture, checkpointing and validation."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .experts import THRESHOLD_FLOOR
from .imaging import Augmentation, PlanarImage, degrade, luminance, sample_patch_arrays, shave_border, stack_luminance
from .metrics import psnr, ssim
from .mixture import MixtureNetwork
from .model_store import save_model
from .pipeline import Predictor, upscale_luminance
from .tensor_ops import Parameter, mse_loss

log = logging.getLogger(__name__)

LOG_HEADER = ("iteration", "loss", "ema_loss")


class NumericAbort(RuntimeError):
    """Training hit a non-finite loss or gradient."""

    def __init__(self, message: str, last_checkpoint: Optional[str] = None):
        if last_checkpoint:
            message = f"{message}; last checkpoint: {last_checkpoint}"
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainConfig:
    batch_size: int = 64
    momentum: float = 0.9
    lr_weight_module: float = 1e-5
    lr_experts: float = 1e-5
    max_iterations: int = 10000
    checkpoint_every: int = 0
    seed: int = 0
    patch_size: int = 56
    scale: int = 2
    stride: Optional[int] = None
    augment_dihedral: bool = True
    augment_scales: Tuple[float, ...] = (0.9, 0.8, 0.7, 0.6)
    lr_decay: float = 1.0
    decay_every: int = 0
    clip_norm: Optional[float] = None
    ema_factor: float = 0.99
    log_every: int = 100

    def __post_init__(self):
        self.augment_scales = tuple(self.augment_scales)
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        for name in ("lr_weight_module", "lr_experts"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.max_iterations < 0:
            raise ValueError(f"max_iterations must be >= 0, got {self.max_iterations}")
        if self.checkpoint_every < 0:
            raise ValueError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        if self.patch_size < 1:
            raise ValueError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.scale < 2:
            raise ValueError(f"scale must be >= 2, got {self.scale}")
        if not 0 < self.lr_decay <= 1:
            raise ValueError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")
        if not 0 <= self.ema_factor < 1:
            raise ValueError(f"ema_factor must lie in [0, 1), got {self.ema_factor}")

    @classmethod
    def from_dict(cls, values: Mapping) -> "TrainConfig":
        unknown = sorted(set(values) - {f.name for f in fields(cls)})
        if unknown:
            raise ValueError(f"unknown train field(s): {', '.join(unknown)}")
        return cls(**values)

    def augmentation(self) -> Augmentation:
        return Augmentation(dihedral=self.augment_dihedral, scales=self.augment_scales)


@dataclass
class TrainState:
    net: MixtureNetwork
    iteration: int = 0
    loss: float = math.nan
    ema_loss: float = math.nan
    history: List[Tuple[int, float, float]] = field(default_factory=list)
    checkpoints: List[str] = field(default_factory=list)
    model_path: Optional[str] = None


def _check_finite(params: Mapping[str, Parameter]) -> None:
    for name, p in params.items():
        if not np.all(np.isfinite(p.grad)):
            raise NumericAbort(f"non-finite gradient in parameter group {name!r}")


def sgd_step(params: Mapping[str, Parameter], lr: Union[float, Mapping[str, float]], momentum: float) -> None:
    """``v <- momentum*v - lr*grad``, ``w <- w + v``, then zero the gradients.

    ``lr`` may be a mapping from parameter name to rate; each rate is
    multiplied by the parameter's ``lr_scale``. Threshold parameters are
    clamped to stay positive.
    """
    _check_finite(params)
    for name, p in params.items():
        rate = (lr[name] if isinstance(lr, Mapping) else lr) * p.lr_scale
        p.momentum *= p.momentum.dtype.type(momentum)
        p.momentum -= p.momentum.dtype.type(rate) * p.grad
        p.value += p.momentum
        if name.endswith("thresholds"):
            np.maximum(p.value, THRESHOLD_FLOOR, out=p.value)
        p.zero_grad()


def clip_gradients(params: Mapping[str, Parameter], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params.values()))
    if norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            p.grad *= p.grad.dtype.type(factor)
    return norm


def learning_rates(net: MixtureNetwork, config: TrainConfig, iteration: int = 0) -> Dict[str, float]:
    decay = config.lr_decay ** (iteration // config.decay_every) if config.decay_every else 1.0
    return {
        name: (config.lr_weight_module if name.startswith("gate.") else config.lr_experts) * decay
        for name in net.parameters()
    }


def batches(stream: Iterator[Tuple[np.ndarray, np.ndarray]], batch_size: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    while True:
        pairs = [next(stream) for _ in range(batch_size)]
        yield stack_luminance([p[0] for p in pairs]), stack_luminance([p[1] for p in pairs])


def _fmt(x: float) -> str:
    return repr(float(x))


def train(
    net: MixtureNetwork,
    corpus: Sequence[PlanarImage],
    config: TrainConfig,
    out_dir: Optional[str] = None,
    progress: Optional[Callable[[TrainState], None]] = None,
) -> TrainState:
    """Minimize the mean squared reconstruction error of ``net`` on patches of ``corpus``.

    With ``out_dir`` set, writes ``loss_log.csv``, ``checkpoint_<iter>.mscn``
    every ``checkpoint_every`` iterations and ``model.mscn`` at the end.
    ``progress`` is called every ``log_every`` iterations.
    """
    if len(corpus) == 0:
        raise ValueError("training corpus is empty")
    state = TrainState(net=net)
    params = net.parameters()
    net.metadata.update(scale=config.scale, iteration=0)

    log_fh = None
    writer = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "loss_log.csv"), "w", newline="")
        writer = csv.writer(log_fh, lineterminator="\n")
        writer.writerow(LOG_HEADER)

    try:
        if config.max_iterations > 0:
            stream = sample_patch_arrays(
                corpus,
                scale=config.scale,
                patch_size=config.patch_size,
                stride=config.stride,
                augment=config.augmentation(),
                seed=config.seed,
                epochs=None,
            )
            data = batches(stream, config.batch_size)
        for it in range(1, config.max_iterations + 1):
            x, target = next(data)
            net.zero_grad()
            pred = net.forward(x)
            loss, grad = mse_loss(pred, target)
            if not math.isfinite(loss):
                raise NumericAbort(f"non-finite loss at iteration {it}", state.checkpoints[-1] if state.checkpoints else None)
            net.backward(grad, input_grad=False)
            if config.clip_norm is not None:
                clip_gradients(params, config.clip_norm)
            try:
                sgd_step(params, learning_rates(net, config, it - 1), config.momentum)
            except NumericAbort as exc:
                raise NumericAbort(f"iteration {it}: {exc}", state.checkpoints[-1] if state.checkpoints else None) from None
            net.clear_cache()

            state.iteration = it
            state.loss = loss
            f = config.ema_factor
            state.ema_loss = loss if it == 1 else f * state.ema_loss + (1 - f) * loss
            state.history.append((it, loss, state.ema_loss))
            if writer is not None:
                writer.writerow((it, _fmt(loss), _fmt(state.ema_loss)))
            net.metadata["iteration"] = it
            if out_dir is not None and config.checkpoint_every and it % config.checkpoint_every == 0:
                path = os.path.join(out_dir, f"checkpoint_{it:07d}.mscn")
                save_model(net, path)
                state.checkpoints.append(path)
            if config.log_every and it % config.log_every == 0:
                log.info("iteration %d loss %.6g ema %.6g", it, loss, state.ema_loss)
                if progress is not None:
                    progress(state)
        if out_dir is not None:
            state.model_path = os.path.join(out_dir, "model.mscn")
            save_model(net, state.model_path)
    finally:
        if log_fh is not None:
            log_fh.close()
    return state


def read_loss_log(path) -> List[Tuple[int, float, float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != LOG_HEADER:
            raise ValueError(f"unexpected loss log header {header}")
        return [(int(r[0]), float(r[1]), float(r[2])) for r in reader]


# ---------------------------------------------------------------------------
# validation


@dataclass
class MetricsRow:
    name: str
    psnr: float
    ssim: float
    bicubic_psnr: float
    bicubic_ssim: float


def evaluate_image(net: Optional[Predictor], hr: PlanarImage, scale: int) -> Tuple[float, float, float, float]:
    """Model and bicubic PSNR/SSIM for one ground-truth image, border shaved by ``scale``."""
    y = luminance(hr)
    lr, bic = degrade(y, scale)
    gt = shave_border(PlanarImage(y.data[: bic.height, : bic.width]), scale)
    sr = upscale_luminance(net, lr, scale) if net is not None else bic
    sr, bic = shave_border(sr, scale), shave_border(bic, scale)
    return psnr(sr, gt), ssim(sr, gt), psnr(bic, gt), ssim(bic, gt)


def validate(
    net: Optional[Predictor],
    images: Sequence[PlanarImage],
    scale: int,
    names: Optional[Sequence[str]] = None,
) -> List[MetricsRow]:
    """Per-image rows followed by a ``mean`` row. ``net=None`` scores bicubic only."""
    names = list(names) if names is not None else [f"image{i}" for i in range(len(images))]
    if len(names) != len(images):
        raise ValueError(f"{len(names)} names for {len(images)} images")
    rows = [MetricsRow(name, *evaluate_image(net, img, scale)) for name, img in zip(names, images)]
    rows.append(mean_row(rows))
    return rows


def mean_row(rows: Sequence[MetricsRow], name: str = "mean") -> MetricsRow:
    if not rows:
        return MetricsRow(name, math.nan, math.nan, math.nan, math.nan)
    return MetricsRow(
        name,
        float(np.mean([r.psnr for r in rows])),
        float(np.mean([r.ssim for r in rows])),
        float(np.mean([r.bicubic_psnr for r in rows])),
        float(np.mean([r.bicubic_ssim for r in rows])),
    )


def rows_as_dicts(rows: Sequence[MetricsRow]) -> List[dict]:
    return [asdict(r) for r in rows]
