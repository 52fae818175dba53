"""
Comparison forecasters: AR-I (autoregression on the differenced series, fit
by least squares), persistence, and LinearSeq, a recurrent encoder that emits
the intercept and slope of a straight-line forecast.
"""

from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from config import ModelConfig, TrainConfig
from data import Normalizer, WindowBatch, WindowSample, make_batch
from layers import (ForwardCacheError, GruCellParams, ParameterSet, SummaryProjection, TensorGroup, bigru_backward,
                    bigru_encode, final_state, final_state_backward, summarize, summarize_backward)
from logger_config import get_logger
from model import RolloutResult
from numerics import init_normal
from training import fit

logger = get_logger(__name__)


class InsufficientDataError(ValueError):
    """Raised when a baseline gets too few points to fit or to forecast."""


class RankDeficientError(InsufficientDataError):
    """Raised when the AR design matrix is rank deficient and the fit is not exact."""


# ==================== AR-I ====================

@dataclass(frozen=True)
class ArModel:
    """x'_t = intercept + sum_k coef[k] * x'_{t-1-k} on the d-times differenced series"""
    order: int
    diff: int
    coef: np.ndarray  # (order,), coef[0] multiplies the most recent lag
    intercept: float

    def __post_init__(self):
        if self.order < 1:
            raise ValueError(f"AR order must be >= 1, got {self.order}")
        if self.diff not in (0, 1):
            raise ValueError(f"differencing order must be 0 or 1, got {self.diff}")
        if self.coef.shape != (self.order,):
            raise ValueError(f"AR coefficients must have shape ({self.order},), got {self.coef.shape}")

    @property
    def history_length(self) -> int:
        """Recent points consumed by one forecast."""
        return self.order + self.diff


def _lag_rows(y: np.ndarray, p: int) -> Tuple[np.ndarray, np.ndarray]:
    n = y.size - p
    lags = np.column_stack([y[p - 1 - k:p - 1 - k + n] for k in range(p)])
    return np.column_stack([lags, np.ones(n)]), y[p:]


def fit_ar(segments: Union[np.ndarray, Sequence[np.ndarray]], p: int, d: int) -> ArModel:
    """
    Ordinary least squares on one-step-ahead errors of the differenced series.

    Args:
        segments: One contiguous series, or several; design rows never span two
        p: Autoregressive order
        d: Differencing order (0 or 1)

    Returns:
        Fitted ArModel

    Raises:
        InsufficientDataError: No segment is longer than p + d + 1
        RankDeficientError: Singular design whose least-squares fit is not exact
    """
    if p < 1 or d not in (0, 1):
        raise ValueError(f"need p >= 1 and d in (0, 1), got p={p}, d={d}")
    if isinstance(segments, np.ndarray) and segments.ndim == 1:
        segments = [segments]

    designs, targets = [], []
    for segment in segments:
        values = np.asarray(segment, dtype=np.float64)
        if values.size <= p + d + 1:
            continue
        X, y = _lag_rows(np.diff(values, n=d) if d else values, p)
        designs.append(X)
        targets.append(y)
    if not designs:
        raise InsufficientDataError(f"AR({p}) with d={d} needs a segment longer than {p + d + 1} points")

    X = np.vstack(designs)
    y = np.concatenate(targets)
    solution, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if rank < X.shape[1]:
        residual = np.max(np.abs(y - X @ solution))
        if residual > 1e-9 * max(1.0, float(np.max(np.abs(y)))):
            raise RankDeficientError(f"AR design matrix has rank {rank} < {X.shape[1]}")
        logger.debug(f"AR design is rank {rank} < {X.shape[1]} but fits exactly; using minimum-norm solution")
    if not np.all(np.isfinite(solution)):
        raise RankDeficientError("AR least-squares solution is not finite")
    return ArModel(order=p, diff=d, coef=solution[:p], intercept=float(solution[p]))


def forecast_ar(model: ArModel, recent: np.ndarray, tau: int) -> np.ndarray:
    """
    Recursive multi-step forecast; with d = 1 the predicted differences are
    accumulated onto the last observed level.
    """
    recent = np.asarray(recent, dtype=np.float64)
    if recent.size < model.history_length:
        raise InsufficientDataError(f"AR forecast needs {model.history_length} recent values, got {recent.size}")
    if tau < 1:
        raise ValueError(f"tau must be >= 1, got {tau}")

    series = np.diff(recent, n=model.diff) if model.diff else recent
    lags = list(series[::-1][:model.order])  # most recent first
    level = recent[-1]
    out = np.empty(tau)
    for i in range(tau):
        step = model.intercept + float(np.dot(model.coef, lags))
        lags = [step] + lags[:-1]
        if model.diff:
            level = level + step
            out[i] = level
        else:
            out[i] = step
    return out


# ==================== Persistence ====================

def persistence_forecast(recent: np.ndarray, tau: int) -> np.ndarray:
    """tau copies of the last observed value."""
    recent = np.asarray(recent, dtype=np.float64)
    if recent.size == 0:
        raise InsufficientDataError("persistence forecast of an empty history")
    return np.full(tau, recent[-1])


# ==================== LinearSeq ====================

@dataclass
class LinearCoefficientHead(TensorGroup):
    W: np.ndarray  # (2, D): rows produce intercept and slope
    b: np.ndarray  # (2,)


@dataclass
class LinearSeqParams(ParameterSet):
    encoder_fwd: GruCellParams
    encoder_bwd: GruCellParams
    summary: SummaryProjection
    head: LinearCoefficientHead

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "LinearSeqParams":
        std = config.init_std
        return cls(
            encoder_fwd=GruCellParams.init(1, config.enc_hidden, rng, std),
            encoder_bwd=GruCellParams.init(1, config.enc_hidden, rng, std),
            summary=SummaryProjection.init(config.encoder_state_dim, config.dec_hidden, rng, std),
            head=LinearCoefficientHead(W=init_normal((2, config.dec_hidden), rng, std), b=init_normal(2, rng, std)),
        )


@dataclass
class LinearSeqCache:
    encoder: object
    H: np.ndarray
    summary: object
    z: np.ndarray


class LinearSeqModel:
    """
    Non-personalized recurrent forecaster: BiGRU encoder and summary
    projection, then a linear head emitting (a, b) with x_{T+i} = a + b * i.
    """

    def __init__(self, config: ModelConfig, params: LinearSeqParams):
        self.config = config
        self.params = params
        self.steps = np.arange(1, config.tau + 1, dtype=np.float64)

    @classmethod
    def create(cls, config: ModelConfig, rng: np.random.Generator) -> "LinearSeqModel":
        return cls(config, LinearSeqParams.init(config, rng))

    @property
    def normalizer(self) -> Normalizer:
        return Normalizer(self.config.norm_mean, self.config.norm_std)

    def num_parameters(self) -> int:
        return self.params.num_parameters()

    def coefficients(self, batch: WindowBatch) -> np.ndarray:
        """(B, 2) intercepts and slopes in normalized space."""
        return self._forward(batch)[0]

    def _forward(self, batch: WindowBatch):
        cfg = self.config
        if batch.inputs.shape[1] != cfg.t0:
            raise ValueError(f"window has {batch.inputs.shape[1]} inputs, model expects t0={cfg.t0}")
        H, enc_cache = bigru_encode(batch.inputs[:, :, None], self.params.encoder_fwd, self.params.encoder_bwd)
        z, sum_cache = summarize(final_state(H, cfg.enc_hidden), self.params.summary)
        coef = z @ self.params.head.W.T + self.params.head.b
        return coef, LinearSeqCache(encoder=enc_cache, H=H, summary=sum_cache, z=z)

    def rollout(self, batch: WindowBatch, forcing_mask: Optional[np.ndarray] = None,
                keep_cache: bool = False) -> RolloutResult:
        # nothing is fed back, so teacher forcing has no effect
        coef, cache = self._forward(batch)
        predictions = coef[:, :1] + coef[:, 1:] * self.steps
        return RolloutResult(predictions=predictions, attention=None, cache=cache if keep_cache else None)

    def backward(self, d_predictions: np.ndarray, cache: Optional[LinearSeqCache]) -> LinearSeqParams:
        if cache is None:
            raise ForwardCacheError("LinearSeq backward called without a forward cache")
        grads = self.params.zeros_like()
        d_coef = np.column_stack([d_predictions.sum(axis=1), d_predictions @ self.steps])
        grads.head.W += d_coef.T @ cache.z
        grads.head.b += d_coef.sum(axis=0)
        dz = d_coef @ self.params.head.W
        d_last = summarize_backward(dz, cache.summary, self.params.summary, grads.summary)
        dH = final_state_backward(d_last, cache.H.shape, self.config.enc_hidden)
        bigru_backward(dH, cache.encoder, self.params.encoder_fwd, self.params.encoder_bwd,
                       grads.encoder_fwd, grads.encoder_bwd)
        return grads

    def predict(self, windows: Sequence[WindowSample], batch_size: int = 256) -> np.ndarray:
        out = np.zeros((len(windows), self.config.tau))
        for start in range(0, len(windows), batch_size):
            chunk = windows[start:start + batch_size]
            batch = make_batch(chunk, self.normalizer)
            out[start:start + len(chunk)] = self.normalizer.invert(self.rollout(batch).predictions)
        return out


def fit_linear_seq(train: Sequence[WindowSample], val: Sequence[WindowSample], config: ModelConfig,
                   train_config: TrainConfig, rng: np.random.Generator):
    """Train LinearSeq with plain (untrimmed) MSE; returns (model, report)."""
    model = LinearSeqModel.create(config, rng)
    return fit(train, val, None, replace(train_config, beta=1.0), rng, model=model)
