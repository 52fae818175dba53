"""
Robust training loop.

Per-sample sequence MSE, trimmed beta-quantile batch aggregation, element-wise
clipping with a per-epoch decaying threshold, the rectified adaptive-moment
optimizer, optional teacher forcing and early stopping on validation loss.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from config import ModelConfig, TrainConfig
from data import WindowBatch, WindowSample, make_batch
from logger_config import get_logger
from model import GlucoseForecaster, RolloutCache, RolloutResult

logger = get_logger(__name__)


class NonFiniteGradientError(FloatingPointError):
    """Raised when a gradient contains NaN or Inf; training aborts."""


class EmptySplitError(ValueError):
    """Raised when a training or validation split has no windows."""


class ParameterContainer(Protocol):
    def named_tensors(self) -> Dict[str, np.ndarray]: ...

    def zeros_like(self): ...

    def copy(self): ...


class TrainableModel(Protocol):
    """What ``fit`` needs from a forecaster."""
    params: ParameterContainer

    @property
    def normalizer(self): ...

    def rollout(self, batch: WindowBatch, forcing_mask: Optional[np.ndarray] = None,
                keep_cache: bool = False) -> RolloutResult: ...

    def backward(self, d_predictions: np.ndarray, cache: Optional[RolloutCache]): ...


# ==================== Losses ====================

def per_sample_loss(forecast: np.ndarray, target: np.ndarray) -> Union[float, np.ndarray]:
    """
    Mean squared error over the tau steps (normalized space).

    A single forecast gives a float, a (B, tau) batch gives (B,) losses.
    """
    forecast = np.asarray(forecast, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if forecast.shape != target.shape:
        raise ValueError(f"forecast shape {forecast.shape} does not match target shape {target.shape}")
    if forecast.shape[-1] == 0:
        raise ValueError("empty forecast")
    losses = np.mean((forecast - target) ** 2, axis=-1)
    return float(losses) if losses.ndim == 0 else losses


def keep_count(batch_size: int, beta: float) -> int:
    # tolerance keeps e.g. 0.7 * 10 from rounding up to 8
    return max(1, min(batch_size, int(math.ceil(beta * batch_size - 1e-9))))


def trimmed_batch_loss(losses: Sequence[float], beta: float) -> Tuple[float, np.ndarray]:
    """
    Mean of the lowest ceil(beta * B) per-sample losses.

    Args:
        losses: Per-sample losses of one mini-batch
        beta: Fraction kept, 0 < beta <= 1

    Returns:
        (loss, kept) with the kept sample indices in ascending order; ties on
        the boundary go to the lower index
    """
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise ValueError("trimmed loss of an empty batch")
    if not 0.0 < beta <= 1.0:
        raise ValueError(f"beta must be in (0, 1], got {beta}")
    order = np.argsort(losses, kind="stable")
    kept = np.sort(order[:keep_count(losses.size, beta)])
    return float(np.mean(losses[kept])), kept


# ==================== Clipping ====================

def clip_gradients(grads, epoch: int, config: TrainConfig):
    """
    Clamp every gradient element to [-c, c] with c = clip_init * clip_decay ** epoch.

    Parameter containers are clipped in place and returned; a bare array is
    returned as a clipped copy.
    """
    threshold = config.clip_threshold(epoch)
    if isinstance(grads, np.ndarray) or np.isscalar(grads):
        return np.clip(grads, -threshold, threshold)
    for tensor in grads.named_tensors().values():
        np.clip(tensor, -threshold, threshold, out=tensor)
    return grads


# ==================== Optimizer ====================

@dataclass
class OptimizerState:
    """First/second moments per named tensor plus the step counter"""
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def create(cls, params: ParameterContainer) -> "OptimizerState":
        tensors = params.named_tensors()
        return cls(m={name: np.zeros_like(t) for name, t in tensors.items()},
                   v={name: np.zeros_like(t) for name, t in tensors.items()})


def rectification(step: int, beta2: float) -> Optional[float]:
    """
    Variance rectification factor of step ``step`` (1-based), or None while the
    variance estimate is not yet tractable and a momentum-only step is taken.
    """
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    beta2_t = beta2 ** step
    rho_t = rho_inf - 2.0 * step * beta2_t / (1.0 - beta2_t)
    if rho_t <= 5.0:
        return None
    return math.sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))


def check_finite(grads: ParameterContainer) -> None:
    for name, tensor in grads.named_tensors().items():
        if not np.all(np.isfinite(tensor)):
            raise NonFiniteGradientError(f"non-finite gradient in {name}")


def optimizer_step(params: ParameterContainer, grads: ParameterContainer, state: OptimizerState,
                   config: TrainConfig) -> None:
    """
    One RAdam (or plain Adam when ``config.rectify`` is off) update, in place.

    Raises:
        NonFiniteGradientError: Any gradient element is NaN or Inf
    """
    check_finite(grads)
    gradients = grads.named_tensors()
    tensors = params.named_tensors()
    if set(gradients) != set(tensors):
        raise ValueError("gradient container does not match the parameters")

    state.step += 1
    t = state.step
    b1, b2 = config.adam_beta1, config.adam_beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    rect = rectification(t, b2) if config.rectify else 1.0

    for name, p in tensors.items():
        g = gradients[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / bias1
        if rect is None:
            p -= config.learning_rate * m_hat
        else:
            v_hat = np.sqrt(v / bias2)
            p -= config.learning_rate * rect * m_hat / (v_hat + config.adam_eps)


# ==================== Batches ====================

def draw_forcing_mask(rng: np.random.Generator, batch_size: int, tau: int, prob: float) -> Optional[np.ndarray]:
    """Per-sample, per-step teacher-forcing decisions; None when forcing is off."""
    if prob <= 0.0:
        return None
    return rng.random((batch_size, tau)) < prob


def batch_gradients(model: TrainableModel, batch: WindowBatch, beta: float,
                    forcing_mask: Optional[np.ndarray] = None):
    """
    Trimmed loss and its gradient for one mini-batch.

    The whole batch is rolled out once to rank per-sample losses; the kept
    samples are then rolled out again with caches and backpropagated, so the
    trimmed samples never enter the backward pass.

    Returns:
        (loss, kept indices, gradients)
    """
    if batch.targets is None:
        raise ValueError("training batch has no targets")
    ranking = model.rollout(batch, forcing_mask=forcing_mask)
    loss, kept = trimmed_batch_loss(per_sample_loss(ranking.predictions, batch.targets), beta)

    sub = batch.subset(kept)
    sub_mask = None if forcing_mask is None else forcing_mask[kept]
    result = model.rollout(sub, forcing_mask=sub_mask, keep_cache=True)
    tau = sub.targets.shape[1]
    d_pred = 2.0 * (result.predictions - sub.targets) / (len(sub) * tau)
    return loss, kept, model.backward(d_pred, result.cache)


def evaluation_loss(model: TrainableModel, batch: WindowBatch, batch_size: int = 512) -> float:
    """Untrimmed mean per-sample MSE over a batch, computed in chunks."""
    total = 0.0
    for start in range(0, len(batch), batch_size):
        chunk = batch.subset(np.arange(start, min(start + batch_size, len(batch))))
        predictions = model.rollout(chunk).predictions
        total += float(np.sum(per_sample_loss(predictions, chunk.targets)))
    return total / len(batch)


# ==================== Training loop ====================

@dataclass
class TrainReport:
    """Per-epoch history of one training run"""
    train_loss: List[float] = field(default_factory=list)  # mean trimmed batch loss
    val_loss: List[float] = field(default_factory=list)  # untrimmed
    clip_threshold: List[float] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch] if self.best_epoch >= 0 else float("inf")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "epoch": np.arange(self.epochs_run),
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "clip_threshold": self.clip_threshold,
            "best": np.arange(self.epochs_run) == self.best_epoch,
        })


def fit(train: Sequence[WindowSample], val: Sequence[WindowSample], model_config: Optional[ModelConfig],
        train_config: TrainConfig, rng: np.random.Generator, patient_ids: Sequence[str] = (),
        model: Optional[TrainableModel] = None) -> Tuple[TrainableModel, TrainReport]:
    """
    Train a forecaster with early stopping.

    Args:
        train: Training windows (mg/dl)
        val: Validation windows (mg/dl)
        model_config: Architecture of a new GlucoseForecaster; ignored when ``model`` is given
        train_config: Loop settings
        rng: Drives initialization, shuffling and teacher forcing
        patient_ids: Embedding rows of a new model
        model: Already constructed model to train instead

    Returns:
        (model, report); the model holds the parameters of the best validation epoch
    """
    if not train:
        raise EmptySplitError("training split has no windows")
    if not val:
        raise EmptySplitError("validation split has no windows")
    if model is None:
        model = GlucoseForecaster.create(model_config, patient_ids, rng)

    normalizer = model.normalizer
    train_batch = make_batch(train, normalizer)
    val_batch = make_batch(val, normalizer)
    tau = train_batch.targets.shape[1]

    state = OptimizerState.create(model.params)
    report = TrainReport()
    best_params = model.params.copy()
    best_val = float("inf")
    stale = 0

    logger.info(f"Training on {len(train)} windows, validating on {len(val)} "
                f"(beta={train_config.beta}, batch={train_config.batch_size})")

    for epoch in range(train_config.max_epochs):
        clip = train_config.clip_threshold(epoch)
        forcing_prob = train_config.teacher_forcing_probability(epoch)
        order = rng.permutation(len(train_batch))
        batch_losses = []

        for start in range(0, len(order), train_config.batch_size):
            batch = train_batch.subset(order[start:start + train_config.batch_size])
            mask = draw_forcing_mask(rng, len(batch), tau, forcing_prob)
            loss, _, grads = batch_gradients(model, batch, train_config.beta, mask)
            check_finite(grads)
            clip_gradients(grads, epoch, train_config)
            optimizer_step(model.params, grads, state, train_config)
            batch_losses.append(loss)

        val_loss = evaluation_loss(model, val_batch)
        report.train_loss.append(float(np.mean(batch_losses)))
        report.val_loss.append(val_loss)
        report.clip_threshold.append(clip)
        logger.debug(f"Epoch {epoch}: train {report.train_loss[-1]:.5f}, val {val_loss:.5f}, clip {clip:.4f}")

        if val_loss < best_val:
            best_val = val_loss
            best_params = model.params.copy()
            report.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= train_config.early_stop_patience:
                report.stopped_early = True
                logger.info(f"Early stopping after epoch {epoch}, best epoch {report.best_epoch}")
                break

    model.params = best_params
    logger.info(f"Training finished: {report.epochs_run} epochs, best validation loss "
                f"{report.best_val_loss:.5f} at epoch {report.best_epoch}")
    return model, report
