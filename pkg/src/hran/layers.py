"""Embeddings, the bias-free GRU cell, bidirectional encoding and the tanh MLP scorer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hran import numerics as nx
from hran.errors import ContractError, DimensionError
from hran.numerics import TracedValue


@dataclass
class Embedding:
    table: TracedValue

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.table.shape[1]


@dataclass
class GruParams:
    """Weights of one GRU. ``W_*`` are ``[hidden, input]``, ``V_*`` are ``[hidden, hidden]``.

    Biases stay ``None`` unless explicitly requested.
    """

    W_z: TracedValue
    W_r: TracedValue
    W_s: TracedValue
    V_z: TracedValue
    V_r: TracedValue
    V_s: TracedValue
    b_z: TracedValue | None = None
    b_r: TracedValue | None = None
    b_s: TracedValue | None = None

    def __post_init__(self):
        hidden, inp = self.W_z.shape
        for name in ("W_r", "W_s"):
            if getattr(self, name).shape != (hidden, inp):
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {(hidden, inp)}")
        for name in ("V_z", "V_r", "V_s"):
            if getattr(self, name).shape != (hidden, hidden):
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {(hidden, hidden)}")

    @property
    def hidden_size(self) -> int:
        return self.W_z.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_z.shape[1]


@dataclass
class MlpScorerParams:
    """One projection ``[attn_dim, d_a]`` per argument, plus the readout vector ``v``."""

    projections: list
    v: TracedValue
    bias: TracedValue | None = None

    @property
    def arity(self) -> int:
        return len(self.projections)


def embed_lookup(emb: Embedding, ids) -> TracedValue:
    return nx.embedding_lookup(emb.table, ids)


def _affine(x, W, h, V, b):
    pre = nx.add(nx.linear(x, W), nx.linear(h, V))
    if b is not None:
        pre = nx.add(pre, nx.broadcast_to(b, pre.shape))
    return pre


def gru_step(p: GruParams, x, h_prev) -> TracedValue:
    """One GRU transition without biases::

        z = sigmoid(W_z x + V_z h)
        r = sigmoid(W_r x + V_r h)
        s = tanh(W_s x + V_s (h * r))
        h' = (1 - z) * s + z * h

    ``x`` and ``h_prev`` may carry any matching leading batch dimensions.
    """
    x, h_prev = nx.as_traced(x), nx.as_traced(h_prev)
    if x.shape[-1] != p.input_size:
        raise DimensionError(f"GRU expects input width {p.input_size}, got {x.shape}")
    if h_prev.shape[-1] != p.hidden_size:
        raise DimensionError(f"GRU expects hidden width {p.hidden_size}, got {h_prev.shape}")
    z = nx.sigmoid(_affine(x, p.W_z, h_prev, p.V_z, p.b_z))
    r = nx.sigmoid(_affine(x, p.W_r, h_prev, p.V_r, p.b_r))
    s = nx.tanh(_affine(x, p.W_s, nx.mul(h_prev, r), p.V_s, p.b_s))
    return nx.add(nx.mul(nx.one_minus(z), s), nx.mul(z, h_prev))


def bigru_encode(fwd: GruParams, bwd: GruParams, emb: Embedding, ids, mask, h0_fwd, h0_bwd):
    """Encode token sequences in both directions and concatenate per position.

    ``ids``/``mask`` are ``[T]`` or batched ``[N, T]``. Returns ``(states, mask)``
    where ``states`` is ``[..., T, 2 * hidden]``. Masked positions pass the
    running state through unchanged, so right-padding never alters the states
    at real positions.
    """
    ids = np.asarray(ids)
    mask = np.asarray(mask, dtype=bool)
    single = ids.ndim == 1
    if single:
        ids, mask = ids[None, :], mask[None, :]
    if ids.shape != mask.shape:
        raise DimensionError(f"ids {ids.shape} and mask {mask.shape} differ")
    n, T = ids.shape
    if T < 1:
        raise ContractError("cannot encode an empty sequence")

    x = [embed_lookup(emb, ids[:, k]) for k in range(T)]

    h = nx.broadcast_to(h0_fwd, (n, fwd.hidden_size))
    forward = []
    for k in range(T):
        h = nx.where(mask[:, k, None], gru_step(fwd, x[k], h), h)
        forward.append(h)

    h = nx.broadcast_to(h0_bwd, (n, bwd.hidden_size))
    backward = [None] * T
    for k in reversed(range(T)):
        h = nx.where(mask[:, k, None], gru_step(bwd, x[k], h), h)
        backward[k] = h

    states = nx.stack([nx.concat([f, b], axis=-1) for f, b in zip(forward, backward)], axis=1)
    if single:
        states = nx.select(states, 0, axis=0)
        mask = mask[0]
    return states, mask


def mlp_score(p: MlpScorerParams, args) -> TracedValue:
    """``v . tanh(sum_a P_a arg_a)``: a one-hidden-layer tanh MLP with scalar readout.

    Arguments are projected separately and broadcast against one another, so a
    ``[B, 1, d]`` decoder state can be scored against ``[B, T, d]`` word states.
    """
    if len(args) != p.arity:
        raise ContractError(f"scorer takes {p.arity} arguments, got {len(args)}")
    projected = [nx.linear(a, P) for a, P in zip(args, p.projections)]
    shape = np.broadcast_shapes(*(t.shape for t in projected))
    hidden = nx.broadcast_to(projected[0], shape)
    for t in projected[1:]:
        hidden = nx.add(hidden, nx.broadcast_to(t, shape))
    if p.bias is not None:
        hidden = nx.add(hidden, nx.broadcast_to(p.bias, shape))
    return nx.matmul(nx.tanh(hidden), p.v)
