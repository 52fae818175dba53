"""
Forward and backward passes of the forecaster's building blocks.

Every forward function returns ``(output, cache)``; the matching backward
function takes the upstream gradient and that cache, accumulates parameter
gradients into a gradient container of the same type as the parameters, and
returns gradients w.r.t. the inputs. Inputs may be a single vector or a batch
of row vectors of shape (B, dim); outputs follow the input's form.
"""

from dataclasses import dataclass, fields
from typing import Dict, List, Optional, Tuple

import numpy as np

from numerics import DTYPE, init_normal, sigmoid, softmax_backward, stable_softmax


class UnknownPatientError(KeyError):
    """Raised when a patient index has no row in the embedding table."""


class ForwardCacheError(RuntimeError):
    """Raised when a backward pass is called without its forward cache."""


def _as_batch(x: np.ndarray, name: str) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim == 2:
        return x, False
    raise ValueError(f"{name} must be a vector or a (batch, dim) matrix, got shape {x.shape}")


def _check_width(x: np.ndarray, width: int, name: str) -> None:
    if x.shape[-1] != width:
        raise ValueError(f"{name} has width {x.shape[-1]}, expected {width}")


def _require_cache(cache, layer: str) -> None:
    if cache is None:
        raise ForwardCacheError(f"{layer} backward called without a forward cache")


class TensorGroup:
    """Mixin for parameter dataclasses whose fields are all ndarrays."""

    def named_tensors(self, prefix: str = "") -> Dict[str, np.ndarray]:
        return {f"{prefix}{f.name}": getattr(self, f.name) for f in fields(self)}

    def zeros_like(self):
        return type(self)(**{f.name: np.zeros_like(getattr(self, f.name)) for f in fields(self)})

    def copy(self):
        return type(self)(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def num_parameters(self) -> int:
        return int(sum(getattr(self, f.name).size for f in fields(self)))


class ParameterSet:
    """Mixin for dataclasses whose fields are TensorGroups, or None for a disabled part."""

    def _groups(self):
        for f in fields(self):
            group = getattr(self, f.name)
            if group is not None:
                yield f.name, group

    def named_tensors(self) -> Dict[str, np.ndarray]:
        tensors: Dict[str, np.ndarray] = {}
        for name, group in self._groups():
            tensors.update(group.named_tensors(prefix=f"{name}."))
        return tensors

    def zeros_like(self):
        return type(self)(**{f.name: (None if getattr(self, f.name) is None else getattr(self, f.name).zeros_like())
                             for f in fields(self)})

    def copy(self):
        return type(self)(**{f.name: (None if getattr(self, f.name) is None else getattr(self, f.name).copy())
                             for f in fields(self)})

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.named_tensors().values()))


# ==================== GRU ====================

@dataclass
class GruCellParams(TensorGroup):
    """
    GRU weights: W_* act on the input, U_* on the hidden state.
    Gates: u (update), r (reset), c (candidate).
    """
    W_u: np.ndarray
    W_r: np.ndarray
    W_c: np.ndarray
    U_u: np.ndarray
    U_r: np.ndarray
    U_c: np.ndarray
    b_u: np.ndarray
    b_r: np.ndarray
    b_c: np.ndarray

    def __post_init__(self):
        hidden, inputs = self.W_u.shape
        for name in ("W_u", "W_r", "W_c"):
            if getattr(self, name).shape != (hidden, inputs):
                raise ValueError(f"GRU {name} must be {(hidden, inputs)}, got {getattr(self, name).shape}")
        for name in ("U_u", "U_r", "U_c"):
            if getattr(self, name).shape != (hidden, hidden):
                raise ValueError(f"GRU {name} must be {(hidden, hidden)}, got {getattr(self, name).shape}")
        for name in ("b_u", "b_r", "b_c"):
            if getattr(self, name).shape != (hidden,):
                raise ValueError(f"GRU {name} must be {(hidden,)}, got {getattr(self, name).shape}")

    @property
    def input_dim(self) -> int:
        return self.W_u.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W_u.shape[0]

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator, std: float = 0.1) -> "GruCellParams":
        return cls(
            W_u=init_normal((hidden_dim, input_dim), rng, std),
            W_r=init_normal((hidden_dim, input_dim), rng, std),
            W_c=init_normal((hidden_dim, input_dim), rng, std),
            U_u=init_normal((hidden_dim, hidden_dim), rng, std),
            U_r=init_normal((hidden_dim, hidden_dim), rng, std),
            U_c=init_normal((hidden_dim, hidden_dim), rng, std),
            b_u=init_normal(hidden_dim, rng, std),
            b_r=init_normal(hidden_dim, rng, std),
            b_c=init_normal(hidden_dim, rng, std),
        )

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int) -> "GruCellParams":
        return cls(
            W_u=np.zeros((hidden_dim, input_dim)), W_r=np.zeros((hidden_dim, input_dim)),
            W_c=np.zeros((hidden_dim, input_dim)), U_u=np.zeros((hidden_dim, hidden_dim)),
            U_r=np.zeros((hidden_dim, hidden_dim)), U_c=np.zeros((hidden_dim, hidden_dim)),
            b_u=np.zeros(hidden_dim), b_r=np.zeros(hidden_dim), b_c=np.zeros(hidden_dim),
        )


@dataclass
class GruCache:
    x: np.ndarray
    h_prev: np.ndarray
    u: np.ndarray
    r: np.ndarray
    c: np.ndarray
    rh: np.ndarray
    squeeze: bool


def gru_cell_forward(x: np.ndarray, h_prev: np.ndarray, p: GruCellParams) -> Tuple[np.ndarray, GruCache]:
    """
    One GRU step.

    u = sigmoid(W_u x + U_u h + b_u)
    r = sigmoid(W_r x + U_r h + b_r)
    c = tanh(W_c x + U_c (r * h) + b_c)
    h' = (1 - u) * h + u * c
    """
    xb, squeeze = _as_batch(x, "GRU input")
    hb, _ = _as_batch(h_prev, "GRU state")
    _check_width(xb, p.input_dim, "GRU input")
    _check_width(hb, p.hidden_dim, "GRU state")
    if xb.shape[0] != hb.shape[0]:
        raise ValueError(f"GRU batch mismatch: input {xb.shape[0]} rows, state {hb.shape[0]} rows")

    u = sigmoid(xb @ p.W_u.T + hb @ p.U_u.T + p.b_u)
    r = sigmoid(xb @ p.W_r.T + hb @ p.U_r.T + p.b_r)
    rh = r * hb
    c = np.tanh(xb @ p.W_c.T + rh @ p.U_c.T + p.b_c)
    h_next = (1.0 - u) * hb + u * c

    cache = GruCache(x=xb, h_prev=hb, u=u, r=r, c=c, rh=rh, squeeze=squeeze)
    return (h_next[0] if squeeze else h_next), cache


def gru_cell_backward(dh_next: np.ndarray, cache: Optional[GruCache], p: GruCellParams,
                      grads: GruCellParams) -> Tuple[np.ndarray, np.ndarray]:
    """
    Backward through one GRU step.

    Returns:
        (dx, dh_prev) in the same vector/batch form as the forward inputs
    """
    _require_cache(cache, "GRU cell")
    dh, _ = _as_batch(dh_next, "GRU upstream gradient")
    x, h, u, r, c, rh = cache.x, cache.h_prev, cache.u, cache.r, cache.c, cache.rh

    du = dh * (c - h)
    dc_pre = dh * u * (1.0 - c * c)
    dh_prev = dh * (1.0 - u)

    grads.W_c += dc_pre.T @ x
    grads.U_c += dc_pre.T @ rh
    grads.b_c += dc_pre.sum(axis=0)
    dx = dc_pre @ p.W_c
    drh = dc_pre @ p.U_c
    dh_prev += drh * r

    dr_pre = drh * h * r * (1.0 - r)
    du_pre = du * u * (1.0 - u)

    grads.W_r += dr_pre.T @ x
    grads.U_r += dr_pre.T @ h
    grads.b_r += dr_pre.sum(axis=0)
    grads.W_u += du_pre.T @ x
    grads.U_u += du_pre.T @ h
    grads.b_u += du_pre.sum(axis=0)

    dx += dr_pre @ p.W_r + du_pre @ p.W_u
    dh_prev += dr_pre @ p.U_r + du_pre @ p.U_u

    if cache.squeeze:
        return dx[0], dh_prev[0]
    return dx, dh_prev


# ==================== Bidirectional encoder ====================

@dataclass
class BiGruCache:
    forward: List[GruCache]
    backward: List[GruCache]  # indexed by sequence position j, not processing order
    squeeze: bool


def bigru_encode(inputs: np.ndarray, fwd: GruCellParams, bwd: GruCellParams) -> Tuple[np.ndarray, BiGruCache]:
    """
    Run forward and backward GRUs over a sequence from zero initial states.

    Args:
        inputs: (t0, I) or (B, t0, I) decorated encoder inputs
        fwd: Forward-direction cell
        bwd: Backward-direction cell

    Returns:
        H of shape (t0, N) or (B, t0, N) with h_j = [forward_j || backward_j],
        N = fwd.hidden_dim + bwd.hidden_dim
    """
    x = np.asarray(inputs, dtype=DTYPE)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3:
        raise ValueError(f"encoder inputs must be (t0, I) or (B, t0, I), got shape {x.shape}")
    batch, t0, _ = x.shape
    if t0 == 0:
        raise ValueError("encoder sequence is empty")

    hf = np.zeros((batch, fwd.hidden_dim))
    hb = np.zeros((batch, bwd.hidden_dim))
    fwd_states, fwd_caches = [], []
    for j in range(t0):
        hf, cache = gru_cell_forward(x[:, j, :], hf, fwd)
        fwd_states.append(hf)
        fwd_caches.append(cache)

    bwd_states: List[Optional[np.ndarray]] = [None] * t0
    bwd_caches: List[Optional[GruCache]] = [None] * t0
    for j in reversed(range(t0)):
        hb, cache = gru_cell_forward(x[:, j, :], hb, bwd)
        bwd_states[j] = hb
        bwd_caches[j] = cache

    H = np.concatenate([np.stack(fwd_states, axis=1), np.stack(bwd_states, axis=1)], axis=2)
    cache = BiGruCache(forward=fwd_caches, backward=bwd_caches, squeeze=squeeze)
    return (H[0] if squeeze else H), cache


def bigru_backward(dH: np.ndarray, cache: Optional[BiGruCache], fwd: GruCellParams, bwd: GruCellParams,
                   grads_fwd: GruCellParams, grads_bwd: GruCellParams) -> np.ndarray:
    """Backpropagation through time for both directions; returns d(inputs)."""
    _require_cache(cache, "BiGRU")
    d = np.asarray(dH, dtype=DTYPE)
    if cache.squeeze:
        d = d[None]
    t0 = len(cache.forward)
    hidden_f = fwd.hidden_dim
    dx = np.zeros((d.shape[0], t0, fwd.input_dim))

    carry = np.zeros((d.shape[0], hidden_f))
    for j in reversed(range(t0)):
        dxj, carry = gru_cell_backward(d[:, j, :hidden_f] + carry, cache.forward[j], fwd, grads_fwd)
        dx[:, j, :] += dxj

    carry = np.zeros((d.shape[0], bwd.hidden_dim))
    for j in range(t0):
        dxj, carry = gru_cell_backward(d[:, j, hidden_f:] + carry, cache.backward[j], bwd, grads_bwd)
        dx[:, j, :] += dxj

    return dx[0] if cache.squeeze else dx


def final_state(H: np.ndarray, forward_dim: int) -> np.ndarray:
    """[forward state after t0 steps || backward state after t0 steps]."""
    return np.concatenate([H[..., -1, :forward_dim], H[..., 0, forward_dim:]], axis=-1)


def final_state_backward(d_last: np.ndarray, H_shape: Tuple[int, ...], forward_dim: int) -> np.ndarray:
    dH = np.zeros(H_shape)
    dH[..., -1, :forward_dim] = d_last[..., :forward_dim]
    dH[..., 0, forward_dim:] += d_last[..., forward_dim:]
    return dH


# ==================== Summary projection ====================

@dataclass
class SummaryProjection(TensorGroup):
    W_z: np.ndarray  # (D, N)

    @classmethod
    def init(cls, state_dim: int, dec_hidden: int, rng: np.random.Generator, std: float = 0.1) -> "SummaryProjection":
        return cls(W_z=init_normal((dec_hidden, state_dim), rng, std))


@dataclass
class SummaryCache:
    h_last: np.ndarray
    z: np.ndarray
    squeeze: bool


def summarize(h_last: np.ndarray, proj: SummaryProjection) -> Tuple[np.ndarray, SummaryCache]:
    """z = tanh(W_z h_last)"""
    h, squeeze = _as_batch(h_last, "summary input")
    _check_width(h, proj.W_z.shape[1], "summary input")
    z = np.tanh(h @ proj.W_z.T)
    return (z[0] if squeeze else z), SummaryCache(h_last=h, z=z, squeeze=squeeze)


def summarize_backward(dz: np.ndarray, cache: Optional[SummaryCache], proj: SummaryProjection,
                       grads: SummaryProjection) -> np.ndarray:
    _require_cache(cache, "summary projection")
    d, _ = _as_batch(dz, "summary upstream gradient")
    d_pre = d * (1.0 - cache.z * cache.z)
    grads.W_z += d_pre.T @ cache.h_last
    dh = d_pre @ proj.W_z
    return dh[0] if cache.squeeze else dh


# ==================== Patient embedding ====================

@dataclass
class EmbeddingTable(TensorGroup):
    table: np.ndarray  # (num_patients, d)

    @property
    def num_patients(self) -> int:
        return self.table.shape[0]

    @classmethod
    def init(cls, num_patients: int, embed_dim: int, rng: np.random.Generator, std: float = 0.1) -> "EmbeddingTable":
        return cls(table=init_normal((num_patients, embed_dim), rng, std))


@dataclass
class EmbeddingCache:
    index: np.ndarray
    squeeze: bool


def embed_patient(v, table: EmbeddingTable) -> Tuple[np.ndarray, EmbeddingCache]:
    """
    Look up patient rows.

    Args:
        v: Patient index or array of indices
        table: Embedding table

    Returns:
        Row v (d,) or rows (B, d)
    """
    index = np.asarray(v)
    squeeze = index.ndim == 0
    index = np.atleast_1d(index)
    if not np.issubdtype(index.dtype, np.integer):
        raise UnknownPatientError(f"patient index must be an integer, got {v!r}")
    bad = (index < 0) | (index >= table.num_patients)
    if np.any(bad):
        raise UnknownPatientError(f"unknown patient index {int(index[bad][0])} "
                                  f"(table holds {table.num_patients} patients)")
    rows = table.table[index]
    return (rows[0] if squeeze else rows), EmbeddingCache(index=index, squeeze=squeeze)


def embedding_backward(dg: np.ndarray, cache: Optional[EmbeddingCache], grads: EmbeddingTable) -> None:
    """Scatter-add row gradients; rows of absent patients stay untouched."""
    _require_cache(cache, "embedding")
    d, _ = _as_batch(dg, "embedding upstream gradient")
    np.add.at(grads.table, cache.index, d)


def mean_embedding(table: EmbeddingTable) -> np.ndarray:
    """Cold-start substitute for patients without a learned row."""
    return table.table.mean(axis=0)


# ==================== Multi-head additive attention ====================

@dataclass
class AttentionHeadParams(TensorGroup):
    W: np.ndarray  # (K, attn_hidden, N + D)
    r: np.ndarray  # (K, attn_hidden)

    def __post_init__(self):
        if self.W.ndim != 3 or self.W.shape[0] < 1:
            raise ValueError(f"attention needs at least one head, got W of shape {self.W.shape}")
        if self.r.shape != self.W.shape[:2]:
            raise ValueError(f"attention r must be {self.W.shape[:2]}, got {self.r.shape}")

    @property
    def num_heads(self) -> int:
        return self.W.shape[0]

    @classmethod
    def init(cls, num_heads: int, attn_hidden: int, state_dim: int, dec_hidden: int,
             rng: np.random.Generator, std: float = 0.1) -> "AttentionHeadParams":
        if num_heads < 1:
            raise ValueError(f"attention needs at least one head, got {num_heads}")
        return cls(W=init_normal((num_heads, attn_hidden, state_dim + dec_hidden), rng, std),
                   r=init_normal((num_heads, attn_hidden), rng, std))


@dataclass
class AttentionCache:
    H: np.ndarray
    s_prev: np.ndarray
    pre: np.ndarray  # (B, K, t0, A) = W_h h_j + W_s s_prev
    e: np.ndarray  # (B, K, t0)
    alpha: np.ndarray  # (B, K, t0)
    a: np.ndarray  # (B, N)
    own_keys: bool
    squeeze: bool


def attention_keys(H: np.ndarray, heads: AttentionHeadParams) -> np.ndarray:
    """The s-independent half of every head's projection, (B, K, t0, A)."""
    Hb = H[None] if H.ndim == 2 else H
    n = Hb.shape[-1]
    return np.einsum('btn,kan->bkta', Hb, heads.W[:, :, :n])


def attention_keys_backward(d_keys: np.ndarray, H: np.ndarray, heads: AttentionHeadParams,
                            grads: AttentionHeadParams) -> np.ndarray:
    """Accumulate W_h gradients; returns the contribution to dH (batched form)."""
    Hb = H[None] if H.ndim == 2 else H
    n = Hb.shape[-1]
    grads.W[:, :, :n] += np.einsum('bkta,btn->kan', d_keys, Hb)
    return np.einsum('bkta,kan->btn', d_keys, heads.W[:, :, :n])


def attention_context(H: np.ndarray, s_prev: np.ndarray, heads: AttentionHeadParams,
                      keys: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray, AttentionCache]:
    """
    Multi-head additive attention over encoder states.

    e^(k)_j = tanh(r^(k) . W^(k) [h_j || s_prev]),  alpha^(k) = softmax_j(e^(k)),
    a = tanh((1/K) sum_k sum_j alpha^(k)_j h_j)

    Args:
        H: (t0, N) or (B, t0, N) encoder states
        s_prev: (D,) or (B, D) previous decoder state
        heads: Per-head W^(k), r^(k)
        keys: Optional precomputed ``attention_keys(H, heads)``

    Returns:
        (a, alpha, cache) with a of width N and alpha of shape (K, t0) per sample
    """
    if heads.num_heads < 1:
        raise ValueError("attention needs at least one head")
    squeeze = np.ndim(H) == 2
    Hb = np.asarray(H, dtype=DTYPE)
    Hb = Hb[None] if squeeze else Hb
    s, _ = _as_batch(s_prev, "decoder state")
    if Hb.shape[1] == 0:
        raise ValueError("attention over an empty encoder sequence")
    n = Hb.shape[-1]
    if heads.W.shape[2] != n + s.shape[1]:
        raise ValueError(f"attention W expects [h || s] of width {heads.W.shape[2]}, got {n} + {s.shape[1]}")
    if Hb.shape[0] != s.shape[0]:
        raise ValueError(f"attention batch mismatch: H has {Hb.shape[0]} rows, s has {s.shape[0]}")

    own_keys = keys is None
    if own_keys:
        keys = attention_keys(Hb, heads)
    query = np.einsum('bd,kad->bka', s, heads.W[:, :, n:])
    pre = keys + query[:, :, None, :]
    e = np.tanh(np.einsum('bkta,ka->bkt', pre, heads.r))
    alpha = stable_softmax(e, axis=-1)
    context = np.einsum('bkt,btn->bn', alpha, Hb) / heads.num_heads
    a = np.tanh(context)

    cache = AttentionCache(H=Hb, s_prev=s, pre=pre, e=e, alpha=alpha, a=a, own_keys=own_keys, squeeze=squeeze)
    if squeeze:
        return a[0], alpha[0], cache
    return a, alpha, cache


def attention_backward(da: np.ndarray, cache: Optional[AttentionCache], heads: AttentionHeadParams,
                       grads: AttentionHeadParams) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """
    Backward through one attention read.

    Returns:
        (dH, ds_prev, d_keys). When the forward pass computed its own keys their
        gradient is already folded into dH and d_keys is None; otherwise the
        caller owns the keys and must pass d_keys to ``attention_keys_backward``.
    """
    _require_cache(cache, "attention")
    d, _ = _as_batch(da, "attention upstream gradient")
    Hb, s, alpha, e = cache.H, cache.s_prev, cache.alpha, cache.e
    n = Hb.shape[-1]
    k = heads.num_heads

    d_context = d * (1.0 - cache.a * cache.a) / k
    dH = np.einsum('bn,bkt->btn', d_context, alpha)
    # every head reads the same averaged context
    d_alpha = np.einsum('bn,btn->bt', d_context, Hb)[:, None, :]
    d_e = softmax_backward(alpha, d_alpha, axis=-1)
    d_score = d_e * (1.0 - e * e)

    grads.r += np.einsum('bkt,bkta->ka', d_score, cache.pre)
    d_pre = d_score[:, :, :, None] * heads.r[None, :, None, :]
    d_query = d_pre.sum(axis=2)
    grads.W[:, :, n:] += np.einsum('bka,bd->kad', d_query, s)
    ds = np.einsum('bka,kad->bd', d_query, heads.W[:, :, n:])

    d_keys: Optional[np.ndarray] = d_pre
    if cache.own_keys:
        dH = dH + attention_keys_backward(d_pre, Hb, heads, grads)
        d_keys = None

    if cache.squeeze:
        return dH[0], ds[0], d_keys
    return dH, ds, d_keys


# ==================== Output network ====================

@dataclass
class FeedforwardHead(TensorGroup):
    """One tanh hidden layer, then a linear scalar output with no activation."""
    W1: np.ndarray  # (hidden, in)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (1, hidden)
    b2: np.ndarray  # (1,)

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    @classmethod
    def init(cls, input_dim: int, hidden: int, rng: np.random.Generator, std: float = 0.1) -> "FeedforwardHead":
        return cls(W1=init_normal((hidden, input_dim), rng, std), b1=init_normal(hidden, rng, std),
                   W2=init_normal((1, hidden), rng, std), b2=init_normal(1, rng, std))


@dataclass
class HeadCache:
    x: np.ndarray
    hidden: np.ndarray
    squeeze: bool


def feedforward_head(x: np.ndarray, q: FeedforwardHead) -> Tuple[np.ndarray, HeadCache]:
    """out = W2 tanh(W1 x + b1) + b2; a float for vector input, (B,) for a batch"""
    xb, squeeze = _as_batch(x, "head input")
    _check_width(xb, q.input_dim, "head input")
    hidden = np.tanh(xb @ q.W1.T + q.b1)
    out = (hidden @ q.W2.T + q.b2)[:, 0]
    cache = HeadCache(x=xb, hidden=hidden, squeeze=squeeze)
    return (out[0] if squeeze else out), cache


def feedforward_head_backward(d_out, cache: Optional[HeadCache], q: FeedforwardHead,
                              grads: FeedforwardHead) -> np.ndarray:
    _require_cache(cache, "feedforward head")
    d = np.atleast_1d(np.asarray(d_out, dtype=DTYPE))[:, None]  # (B, 1)
    grads.W2 += d.T @ cache.hidden
    grads.b2 += d.sum(axis=0)
    d_pre = (d @ q.W2) * (1.0 - cache.hidden * cache.hidden)
    grads.W1 += d_pre.T @ cache.x
    grads.b1 += d_pre.sum(axis=0)
    dx = d_pre @ q.W1
    return dx[0] if cache.squeeze else dx
