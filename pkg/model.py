"""
Personalized attention-based encoder-decoder forecaster.

Assembles the layers into the full model (and its non-attention / no-embedding
ablations), runs the autoregressive roll-out with an explicit backward pass
through the unrolled graph, and reads/writes the model file.
"""

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from config import ModelConfig
from data import Normalizer, WindowBatch, WindowSample, make_batch
from layers import (AttentionHeadParams, BiGruCache, EmbeddingTable, FeedforwardHead, GruCellParams, ParameterSet,
                    SummaryProjection, UnknownPatientError, attention_backward, attention_context,
                    attention_keys, attention_keys_backward, bigru_backward, bigru_encode,
                    embed_patient, embedding_backward, feedforward_head, feedforward_head_backward,
                    final_state, final_state_backward, gru_cell_backward, gru_cell_forward,
                    mean_embedding, summarize, summarize_backward)
from logger_config import get_logger
from numerics import make_rng

logger = get_logger(__name__)

MODEL_FILE_FORMAT = "glucose-forecaster"
MODEL_FILE_VERSION = 1


class ModelFileError(ValueError):
    """Raised for unreadable, truncated or inconsistent model files."""


@dataclass
class ModelParams(ParameterSet):
    """All learnable tensors; gradients use the same container."""
    encoder_fwd: GruCellParams
    encoder_bwd: GruCellParams
    summary: SummaryProjection
    decoder: GruCellParams
    head: FeedforwardHead
    attention: Optional[AttentionHeadParams] = None
    embedding: Optional[EmbeddingTable] = None

    @classmethod
    def init(cls, config: ModelConfig, num_patients: int, rng: np.random.Generator) -> "ModelParams":
        std = config.init_std
        return cls(
            encoder_fwd=GruCellParams.init(config.encoder_input_dim, config.enc_hidden, rng, std),
            encoder_bwd=GruCellParams.init(config.encoder_input_dim, config.enc_hidden, rng, std),
            summary=SummaryProjection.init(config.encoder_state_dim, config.dec_hidden, rng, std),
            decoder=GruCellParams.init(config.decoder_input_dim, config.dec_hidden, rng, std),
            head=FeedforwardHead.init(config.head_input_dim, config.head_hidden, rng, std),
            attention=(AttentionHeadParams.init(config.attn_heads, config.attn_hidden, config.encoder_state_dim,
                                                config.dec_hidden, rng, std)
                       if config.use_attention else None),
            embedding=(EmbeddingTable.init(num_patients, config.embed_dim, rng, std)
                       if config.use_embedding else None),
        )

    @classmethod
    def zeros(cls, config: ModelConfig, num_patients: int) -> "ModelParams":
        return cls.init(config, max(num_patients, 1), make_rng(0)).zeros_like()


@dataclass
class Forecast:
    patient_id: str
    anchor: pd.Timestamp  # time of x_T
    timestamps: List[pd.Timestamp]  # T+1 .. T+tau
    values: np.ndarray  # mg/dl
    attention: Optional[np.ndarray] = None  # (tau, K, t0)


@dataclass
class StepCache:
    attention: Optional[object]
    gru: object
    head: object


@dataclass
class RolloutCache:
    embedding: Optional[object]
    encoder: BiGruCache
    H: np.ndarray
    summary: object
    steps: List[StepCache]
    used_prediction: List[np.ndarray]  # per step: which rows consumed the previous prediction


@dataclass
class RolloutResult:
    predictions: np.ndarray  # (B, tau), normalized
    attention: Optional[np.ndarray]  # (B, tau, K, t0)
    cache: Optional[RolloutCache] = None


def _concat(parts: Sequence[Optional[np.ndarray]]) -> np.ndarray:
    return np.concatenate([p for p in parts if p is not None], axis=1)


def decoder_step(s_prev: np.ndarray, x_prev: np.ndarray, g_v: Optional[np.ndarray], time_step: Optional[np.ndarray],
                 H: np.ndarray, params: ModelParams, config: ModelConfig, keys: Optional[np.ndarray] = None
                 ) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray], StepCache]:
    """
    One decoder step for a batch.

    With attention:
        s_i = GRU([a_i || g(v) || x_prev || time], s_{i-1})
        x_i = Q([a_i || s_i || g(v) || x_prev || time])
    Without attention:
        s_i = GRU([g(v) || x_prev || time], s_{i-1}),  x_i = Q([s_i || g(v) || time])

    Args:
        s_prev: (B, D) previous decoder state
        x_prev: (B,) previous prediction, or x_T at the first step (normalized)
        g_v: (B, d) patient embeddings, None when embeddings are off
        time_step: (B, 3) time features of the forecast step, None when off
        H: (B, t0, N) encoder states
        params: Model parameters
        config: Model configuration
        keys: Precomputed attention keys for H

    Returns:
        (s_i, x_i, alpha_i, cache) with alpha_i of shape (B, K, t0) or None
    """
    if s_prev.shape[-1] != config.dec_hidden:
        raise ValueError(f"decoder state has width {s_prev.shape[-1]}, expected {config.dec_hidden}")
    if (g_v is None) == config.use_embedding:
        raise ValueError("patient embedding presence does not match use_embedding")
    if (time_step is None) == config.use_time_features:
        raise ValueError("time feature presence does not match use_time_features")

    x_col = np.asarray(x_prev, dtype=np.float64).reshape(-1, 1)
    a = alpha = att_cache = None
    if config.use_attention:
        a, alpha, att_cache = attention_context(H, s_prev, params.attention, keys=keys)

    s_next, gru_cache = gru_cell_forward(_concat([a, g_v, x_col, time_step]), s_prev, params.decoder)
    if config.use_attention:
        head_in = _concat([a, s_next, g_v, x_col, time_step])
    else:
        head_in = _concat([s_next, g_v, time_step])
    x_next, head_cache = feedforward_head(head_in, params.head)
    return s_next, x_next, alpha, StepCache(attention=att_cache, gru=gru_cache, head=head_cache)


def decoder_step_backward(ds_next: np.ndarray, dx_next: np.ndarray, cache: StepCache, params: ModelParams,
                          grads: ModelParams, config: ModelConfig
                          ) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray], Optional[np.ndarray],
                                     Optional[np.ndarray]]:
    """
    Returns:
        (ds_prev, dx_prev, dg, dH, d_keys); dg/dH/d_keys are None when the
        corresponding feature is off
    """
    n = config.encoder_state_dim if config.use_attention else 0
    d = config.embed_width
    d_head_in = feedforward_head_backward(dx_next, cache.head, params.head, grads.head)

    offset = 0
    da = d_head_in[:, :n] if n else None
    offset += n
    ds = ds_next + d_head_in[:, offset:offset + config.dec_hidden]
    offset += config.dec_hidden
    dg = d_head_in[:, offset:offset + d] if d else None
    offset += d
    dx_prev = d_head_in[:, offset] if config.use_attention else np.zeros(d_head_in.shape[0])

    d_dec_in, ds_prev = gru_cell_backward(ds, cache.gru, params.decoder, grads.decoder)
    offset = 0
    if n:
        da = da + d_dec_in[:, :n]
        offset += n
    if d:
        dg = dg + d_dec_in[:, offset:offset + d]
        offset += d
    dx_prev = dx_prev + d_dec_in[:, offset]

    dH = d_keys = None
    if config.use_attention:
        dH, ds_att, d_keys = attention_backward(da, cache.attention, params.attention, grads.attention)
        ds_prev = ds_prev + ds_att
    return ds_prev, dx_prev, dg, dH, d_keys


class GlucoseForecaster:
    """Encoder-decoder forecaster with optional attention, embeddings and time features"""

    def __init__(self, config: ModelConfig, params: ModelParams, patient_ids: Sequence[str]):
        """
        Initialize the forecaster.

        Args:
            config: Architecture and normalization statistics
            params: Parameters consistent with the config
            patient_ids: Registered patients, row i of the embedding table is patient_ids[i]
        """
        self.config = config
        self.params = params
        self.patient_ids = list(patient_ids)
        self.patient_index = {pid: i for i, pid in enumerate(self.patient_ids)}
        self.cold_start = False
        # called as hook(step, x_prev) before every decoder step
        self.step_hooks: List[Callable[[int, np.ndarray], None]] = []

        if config.use_embedding and params.embedding.num_patients != len(self.patient_ids):
            raise ValueError(f"embedding table has {params.embedding.num_patients} rows "
                             f"for {len(self.patient_ids)} patients")

    @classmethod
    def create(cls, config: ModelConfig, patient_ids: Sequence[str], rng: np.random.Generator) -> "GlucoseForecaster":
        return cls(config, ModelParams.init(config, len(patient_ids), rng), patient_ids)

    @property
    def normalizer(self) -> Normalizer:
        return Normalizer(self.config.norm_mean, self.config.norm_std)

    def num_parameters(self) -> int:
        return self.params.num_parameters()

    def resolve_patient(self, patient_id: str) -> int:
        """Embedding row of a patient, -1 for an unregistered one."""
        return self.patient_index.get(patient_id, -1)

    def _embeddings(self, patient_index: np.ndarray):
        if not self.config.use_embedding:
            return None, None
        unknown = patient_index < 0
        if not np.any(unknown):
            return embed_patient(patient_index, self.params.embedding)
        if not self.cold_start:
            raise UnknownPatientError("window belongs to a patient without an embedding row; "
                                      "enable cold start to use the mean embedding")
        g = np.empty((patient_index.size, self.config.embed_dim))
        g[unknown] = mean_embedding(self.params.embedding)
        if np.any(~unknown):
            g[~unknown] = embed_patient(patient_index[~unknown], self.params.embedding)[0]
        return g, None

    def rollout(self, batch: WindowBatch, forcing_mask: Optional[np.ndarray] = None,
                keep_cache: bool = False) -> RolloutResult:
        """
        Encode the windows and unroll the decoder for tau steps.

        Args:
            batch: Normalized windows
            forcing_mask: Optional (B, tau) booleans; where column i is set the true
                x_{T+i+1} replaces the prediction as the next decoder input (training only)
            keep_cache: Keep intermediates for ``backward``

        Returns:
            RolloutResult with normalized predictions and attention maps
        """
        cfg = self.config
        if batch.inputs.shape[1] != cfg.t0:
            raise ValueError(f"window has {batch.inputs.shape[1]} inputs, model expects t0={cfg.t0}")
        if batch.time_features.shape[1] != cfg.t0 + cfg.tau:
            raise ValueError(f"window has {batch.time_features.shape[1]} time steps, expected {cfg.t0 + cfg.tau}")
        if forcing_mask is not None:
            if batch.targets is None:
                raise ValueError("teacher forcing needs targets")
            if forcing_mask.shape != (len(batch), cfg.tau):
                raise ValueError(f"forcing mask must be {(len(batch), cfg.tau)}, got {forcing_mask.shape}")

        B = len(batch)
        g, emb_cache = self._embeddings(batch.patient_index)
        times = batch.time_features if cfg.use_time_features else None

        enc_in = _concat([
            batch.inputs.reshape(B * cfg.t0, 1),
            None if g is None else np.repeat(g, cfg.t0, axis=0),
            None if times is None else times[:, :cfg.t0].reshape(B * cfg.t0, -1),
        ]).reshape(B, cfg.t0, -1)
        H, enc_cache = bigru_encode(enc_in, self.params.encoder_fwd, self.params.encoder_bwd)
        z, sum_cache = summarize(final_state(H, cfg.enc_hidden), self.params.summary)
        keys = attention_keys(H, self.params.attention) if cfg.use_attention else None

        predictions = np.zeros((B, cfg.tau))
        attention = np.zeros((B, cfg.tau, cfg.attn_heads, cfg.t0)) if cfg.use_attention else None
        steps: List[StepCache] = []
        used_prediction: List[np.ndarray] = []

        s = z
        x_prev = batch.inputs[:, -1]
        used = np.zeros(B, dtype=bool)
        for i in range(cfg.tau):
            for hook in self.step_hooks:
                hook(i, x_prev)
            time_step = None if times is None else times[:, cfg.t0 + i]
            s, x_hat, alpha, step_cache = decoder_step(s, x_prev, g, time_step, H, self.params, cfg, keys)
            predictions[:, i] = x_hat
            if attention is not None:
                attention[:, i] = alpha
            if keep_cache:
                steps.append(step_cache)
                used_prediction.append(used)

            if forcing_mask is not None:
                forced = forcing_mask[:, i]
                x_prev = np.where(forced, batch.targets[:, i], x_hat)
                used = ~forced
            else:
                x_prev = x_hat
                used = np.ones(B, dtype=bool)

        cache = None
        if keep_cache:
            cache = RolloutCache(embedding=emb_cache, encoder=enc_cache, H=H, summary=sum_cache,
                                 steps=steps, used_prediction=used_prediction)
        return RolloutResult(predictions=predictions, attention=attention, cache=cache)

    def backward(self, d_predictions: np.ndarray, cache: Optional[RolloutCache]) -> ModelParams:
        """
        Gradients of a loss w.r.t. every parameter, given dLoss/dPredictions (B, tau)
        in normalized space.
        """
        if cache is None:
            raise ValueError("backward needs the cache of a rollout run with keep_cache=True")
        if self.config.use_embedding and cache.embedding is None:
            raise ValueError("cannot backpropagate through cold-start embeddings")
        cfg = self.config
        grads = self.params.zeros_like()
        B = d_predictions.shape[0]

        dg = np.zeros((B, cfg.embed_dim)) if cfg.use_embedding else None
        dH = np.zeros_like(cache.H)
        d_keys_total = None
        ds = np.zeros((B, cfg.dec_hidden))
        dx_carry = np.zeros(B)

        for i in reversed(range(cfg.tau)):
            dx = d_predictions[:, i] + dx_carry
            ds, dx_prev, dg_i, dH_i, d_keys = decoder_step_backward(ds, dx, cache.steps[i], self.params,
                                                                   grads, cfg)
            if dg is not None:
                dg += dg_i
            if dH_i is not None:
                dH += dH_i
            if d_keys is not None:
                d_keys_total = d_keys if d_keys_total is None else d_keys_total + d_keys
            dx_carry = dx_prev * cache.used_prediction[i]

        d_last = summarize_backward(ds, cache.summary, self.params.summary, grads.summary)
        dH += final_state_backward(d_last, cache.H.shape, cfg.enc_hidden)
        if d_keys_total is not None:
            dH += attention_keys_backward(d_keys_total, cache.H, self.params.attention, grads.attention)

        d_enc_in = bigru_backward(dH, cache.encoder, self.params.encoder_fwd, self.params.encoder_bwd,
                                  grads.encoder_fwd, grads.encoder_bwd)
        if dg is not None:
            dg += d_enc_in[:, :, 1:1 + cfg.embed_dim].sum(axis=1)
            embedding_backward(dg, cache.embedding, grads.embedding)
        return grads

    def predict(self, windows: Sequence[WindowSample], batch_size: int = 256) -> np.ndarray:
        """De-normalized forecasts (mg/dl) for many windows, shape (len(windows), tau)."""
        out = np.zeros((len(windows), self.config.tau))
        for start in range(0, len(windows), batch_size):
            chunk = windows[start:start + batch_size]
            batch = make_batch(chunk, self.normalizer)
            out[start:start + len(chunk)] = self.normalizer.invert(self.rollout(batch).predictions)
        return out

    def forecast(self, window: WindowSample, cadence_seconds: int = 300) -> Forecast:
        """
        Forecast the tau readings after a window's anchor.

        Raises:
            UnknownPatientError: Patient not registered and cold start disabled
        """
        batch = make_batch([window], self.normalizer)
        result = self.rollout(batch)
        anchor = pd.Timestamp(window.anchor)
        step = pd.Timedelta(seconds=cadence_seconds)
        return Forecast(
            patient_id=window.patient_id,
            anchor=anchor,
            timestamps=[anchor + step * (i + 1) for i in range(self.config.tau)],
            values=self.normalizer.invert(result.predictions[0]),
            attention=None if result.attention is None else result.attention[0],
        )

    def save(self, path: Union[str, Path]) -> None:
        save_model(self.params, self.config, self.patient_ids, path)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "GlucoseForecaster":
        params, config, patient_ids = load_model(path)
        return cls(config, params, patient_ids)


# ==================== Model file ====================

def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def save_model(params: ModelParams, config: ModelConfig, patient_ids: Sequence[str],
               path: Union[str, Path]) -> None:
    """
    Write the model file: one JSON document per line, a header listing every
    section, then the config, the patient ids and one line per tensor.
    """
    tensors = params.named_tensors()
    sections = ["config", "patients"] + [f"param:{name}" for name in tensors]
    lines = [
        _dumps({"format": MODEL_FILE_FORMAT, "version": MODEL_FILE_VERSION, "sections": sections}),
        _dumps({"section": "config", "data": asdict(config)}),
        _dumps({"section": "patients", "data": list(patient_ids)}),
    ]
    for name, tensor in tensors.items():
        lines.append(_dumps({"section": f"param:{name}", "shape": list(tensor.shape), "data": tensor.tolist()}))

    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
    logger.info(f"Saved model with {params.num_parameters()} parameters to {path}")


def load_model(path: Union[str, Path]) -> Tuple[ModelParams, ModelConfig, List[str]]:
    """
    Read a model file written by ``save_model``.

    Returns:
        (params, config, patient_ids)

    Raises:
        ModelFileError: Wrong format/version, missing or unknown sections,
            unknown config fields or shape mismatches
    """
    with open(path, "r", encoding="utf-8") as f:
        raw_lines = f.read().split("\n")

    try:
        header = json.loads(raw_lines[0])
    except (json.JSONDecodeError, IndexError) as e:
        raise ModelFileError(f"{path}: missing or unreadable header") from e
    if not isinstance(header, dict) or header.get("format") != MODEL_FILE_FORMAT:
        raise ModelFileError(f"{path}: not a {MODEL_FILE_FORMAT} file")
    if header.get("version") != MODEL_FILE_VERSION:
        raise ModelFileError(f"{path}: model file version {header.get('version')!r}, "
                             f"this build reads version {MODEL_FILE_VERSION}")
    declared = header.get("sections")
    if not isinstance(declared, list):
        raise ModelFileError(f"{path}: header does not list its sections")

    sections: Dict[str, dict] = {}
    for line_no, line in enumerate(raw_lines[1:], start=2):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError:
            # a cut-off line is reported as a missing section below
            logger.warning(f"{path}: line {line_no} is unreadable")
            continue
        name = record.get("section") if isinstance(record, dict) else None
        if name not in declared:
            raise ModelFileError(f"{path}: line {line_no}: unknown section {name!r}")
        sections[name] = record

    missing = [name for name in declared if name not in sections]
    if missing:
        raise ModelFileError(f"{path}: truncated or incomplete, missing section '{missing[0]}'"
                             + (f" and {len(missing) - 1} more" if len(missing) > 1 else ""))

    config_data = sections["config"]["data"]
    known = {f.name for f in fields(ModelConfig)}
    unknown = sorted(set(config_data) - known)
    if unknown:
        raise ModelFileError(f"{path}: unknown config field(s): {', '.join(unknown)}")
    try:
        config = ModelConfig(**config_data)
    except (TypeError, ValueError) as e:
        raise ModelFileError(f"{path}: invalid config: {e}") from e
    patient_ids = [str(p) for p in sections["patients"]["data"]]

    params = ModelParams.zeros(config, len(patient_ids))
    expected = params.named_tensors()
    expected_sections = {f"param:{name}" for name in expected}
    declared_params = {name for name in declared if name.startswith("param:")}
    if declared_params != expected_sections:
        extra = sorted(declared_params - expected_sections)
        absent = sorted(expected_sections - declared_params)
        raise ModelFileError(f"{path}: parameter sections do not match the config "
                             f"(unexpected: {extra}, missing: {absent})")

    for name, target in expected.items():
        record = sections[f"param:{name}"]
        array = np.asarray(record["data"], dtype=np.float64)
        if list(array.shape) != list(record.get("shape", [])) or array.shape != target.shape:
            raise ModelFileError(f"{path}: tensor {name} has shape {array.shape}, expected {target.shape}")
        target[...] = array

    return params, config, patient_ids
