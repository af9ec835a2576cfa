"""The hierarchical recurrent attention network.

Everything runs batched: a batch of ``B`` contexts is padded to ``M`` utterances
of ``T`` words, and masks keep padding out of every softmax and recurrence. The
per-example results are identical to running examples one at a time.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from hran import numerics as nx
from hran.corpus import BOS, Batch
from hran.errors import ContextError, ContractError, DimensionError, ParameterError
from hran.layers import Embedding, GruParams, MlpScorerParams, bigru_encode, embed_lookup, gru_step, mlp_score
from hran.numerics import TracedValue

ABLATIONS = ("full", "no-ud-att", "no-word-att", "no-utt-att")
_GRU = ("W_z", "W_r", "W_s", "V_z", "V_r", "V_s")


@dataclass
class ModelConfig:
    context_vocab_size: int
    response_vocab_size: int
    word_hidden: int = 8
    utt_hidden: int = 8
    decoder_hidden: int = 8
    embed_dim: int = 6
    attn_dim: int | None = None  # defaults to decoder_hidden
    ablation: str = "full"
    max_decode_length: int = 50
    precision: str = "float64"
    seed: int = 0
    init_variance: float = 0.01
    # "variance": N(0, 0.01) means variance 0.01; "std": it means standard deviation 0.01
    init_interpretation: str = "variance"
    use_bias: bool = False

    def __post_init__(self):
        if self.attn_dim is None:
            self.attn_dim = self.decoder_hidden
        dims = ("context_vocab_size", "response_vocab_size", "word_hidden", "utt_hidden",
                "decoder_hidden", "embed_dim", "attn_dim", "max_decode_length")
        for name in dims:
            if int(getattr(self, name)) < 1:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if self.ablation not in ABLATIONS:
            raise ParameterError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.precision not in ("float64", "float32"):
            raise ParameterError(f"precision must be float64 or float32, got {self.precision!r}")
        if self.init_interpretation not in ("variance", "std"):
            raise ParameterError("init_interpretation must be 'variance' or 'std'")
        if not self.init_variance > 0:
            raise ParameterError("init_variance must be positive")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    @property
    def init_sigma(self) -> float:
        if self.init_interpretation == "variance":
            return float(np.sqrt(self.init_variance))
        return float(self.init_variance)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def parameter_shapes(config: ModelConfig) -> dict:
    """Name -> shape for every trainable tensor, in a fixed order (also the init order)."""
    E, Hw, Hu, Hd, A = config.embed_dim, config.word_hidden, config.utt_hidden, config.decoder_hidden, config.attn_dim
    shapes = {
        "context_embedding": (config.context_vocab_size, E),
        "response_embedding": (config.response_vocab_size, E),
    }

    def gru(prefix, hidden, inp):
        for w in _GRU:
            shapes[f"{prefix}.{w}"] = (hidden, inp) if w[0] == "W" else (hidden, hidden)
        if config.use_bias:
            for b in ("b_z", "b_r", "b_s"):
                shapes[f"{prefix}.{b}"] = (hidden,)

    gru("word_fwd", Hw, E)
    gru("word_bwd", Hw, E)
    shapes["word_fwd.h0"] = (Hw,)
    shapes["word_bwd.h0"] = (Hw,)
    gru("utterance", Hu, 2 * Hw)
    shapes["utterance.l_init"] = (Hu,)
    if config.ablation != "no-word-att":
        shapes["word_attn.P_s"] = (A, Hd)
        if config.ablation != "no-ud-att":
            shapes["word_attn.P_l"] = (A, Hu)
        shapes["word_attn.P_h"] = (A, 2 * Hw)
        shapes["word_attn.v"] = (A,)
        if config.use_bias:
            shapes["word_attn.b"] = (A,)
    if config.ablation != "no-utt-att":
        shapes["utt_attn.P_s"] = (A, Hd)
        shapes["utt_attn.P_l"] = (A, Hu)
        shapes["utt_attn.v"] = (A,)
        if config.use_bias:
            shapes["utt_attn.b"] = (A,)
    gru("decoder", Hd, E + Hu)
    shapes["output.W"] = (config.response_vocab_size, Hd + E)
    if config.use_bias:
        shapes["output.b"] = (config.response_vocab_size,)
    return shapes


def init_params(config: ModelConfig) -> dict:
    """Draw every weight i.i.d. from a zero-mean Gaussian; biases (if enabled) start at zero."""
    rng = nx.make_rng(config.seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.rsplit(".", 1)[-1] in ("b_z", "b_r", "b_s", "b"):
            value = np.zeros(shape, dtype=config.dtype)
        else:
            value = nx.gaussian_init(rng, shape, config.init_sigma, dtype=config.dtype)
        params[name] = TracedValue(value, requires_grad=True, name=name)
    return params


@dataclass
class EncodedContext:
    states: TracedValue  # [B, M, T, 2 * word_hidden]
    per_utterance: list  # M tensors of [B, T, 2 * word_hidden]
    word_mask: np.ndarray  # [B, M, T]
    utt_mask: np.ndarray  # [B, M]

    @property
    def num_utterances(self) -> np.ndarray:
        return self.utt_mask.sum(axis=1)


@dataclass
class AttentionStep:
    beta: np.ndarray  # [m]
    alphas: list  # m arrays, one per utterance, over its real words


@dataclass
class AttentionTrace:
    steps: list = field(default_factory=list)

    def __len__(self):
        return len(self.steps)

    def utterance_importance(self) -> np.ndarray:
        return np.mean([s.beta for s in self.steps], axis=0)

    def word_importance(self) -> list:
        m = len(self.steps[0].alphas)
        return [np.mean([s.alphas[i] for s in self.steps], axis=0) for i in range(m)]

    def to_dict(self) -> dict:
        return {
            "steps": [
                {"beta": s.beta.tolist(), "alpha": [a.tolist() for a in s.alphas]} for s in self.steps
            ],
            "utterance_importance": self.utterance_importance().tolist(),
            "word_importance": [w.tolist() for w in self.word_importance()],
        }


def split_trace(alpha: np.ndarray, beta: np.ndarray, word_mask: np.ndarray, utt_mask: np.ndarray, b: int):
    """Cut row ``b`` of a batched step record down to its real utterances and words."""
    m = int(utt_mask[b].sum())
    return AttentionStep(
        beta=beta[b, :m].copy(),
        alphas=[alpha[b, i, word_mask[b, i]].copy() for i in range(m)],
    )


@dataclass
class NllResult:
    loss: TracedValue  # scalar, summed over the batch
    per_example: np.ndarray  # [B]
    num_tokens: int
    traces: list | None = None


def _uniform(mask: np.ndarray, dtype) -> np.ndarray:
    counts = mask.sum(axis=-1, keepdims=True)
    return (mask / np.where(counts == 0, 1, counts)).astype(dtype)


class HRAN:
    """Parameters plus the forward computations of the network."""

    def __init__(self, config: ModelConfig, params: dict | None = None):
        self.config = config
        self.params = init_params(config) if params is None else params
        expected = parameter_shapes(config)
        if list(self.params) != list(expected) or any(
            self.params[k].shape != s for k, s in expected.items()
        ):
            raise DimensionError("parameter set does not match the model configuration")
        p = self.params
        self.context_embedding = Embedding(p["context_embedding"])
        self.response_embedding = Embedding(p["response_embedding"])
        self.word_fwd = self._gru("word_fwd")
        self.word_bwd = self._gru("word_bwd")
        self.utterance_gru = self._gru("utterance")
        self.decoder_gru = self._gru("decoder")
        self.word_scorer = None
        if config.ablation != "no-word-att":
            projections = [p["word_attn.P_s"]]
            if config.ablation != "no-ud-att":
                projections.append(p["word_attn.P_l"])
            projections.append(p["word_attn.P_h"])
            self.word_scorer = MlpScorerParams(projections, p["word_attn.v"], p.get("word_attn.b"))
        self.utt_scorer = None
        if config.ablation != "no-utt-att":
            self.utt_scorer = MlpScorerParams(
                [p["utt_attn.P_s"], p["utt_attn.P_l"]], p["utt_attn.v"], p.get("utt_attn.b")
            )

    def _gru(self, prefix: str) -> GruParams:
        p = self.params
        return GruParams(*(p[f"{prefix}.{w}"] for w in _GRU),
                         *(p.get(f"{prefix}.{b}") for b in ("b_z", "b_r", "b_s")))

    def num_parameters(self) -> int:
        return sum(int(t.value.size) for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    # ------------------------------------------------------------ encoder

    def encode_words(self, context_ids, word_mask, utt_mask) -> EncodedContext:
        """Run the shared word-level BiGRU over every utterance of every context."""
        context_ids = np.asarray(context_ids)
        word_mask = np.asarray(word_mask, dtype=bool)
        utt_mask = np.asarray(utt_mask, dtype=bool)
        if context_ids.ndim != 3 or context_ids.shape != word_mask.shape or utt_mask.shape != context_ids.shape[:2]:
            raise DimensionError(
                f"context ids {context_ids.shape}, word mask {word_mask.shape}, utterance mask {utt_mask.shape} disagree"
            )
        m = utt_mask.sum(axis=1)
        if np.any(m < 2):
            raise ContextError(f"a context needs at least 2 utterances, got {int(m.min())}")
        if np.any(utt_mask & ~word_mask.any(axis=2)):
            raise ContractError("a real utterance has no words")
        B, M, T = context_ids.shape
        flat, _ = bigru_encode(
            self.word_fwd, self.word_bwd, self.context_embedding,
            context_ids.reshape(B * M, T), word_mask.reshape(B * M, T),
            self.params["word_fwd.h0"], self.params["word_bwd.h0"],
        )
        states = nx.reshape(flat, (B, M, T, 2 * self.config.word_hidden))
        per_utt = [nx.select(states, i, axis=1) for i in range(M)]
        return EncodedContext(states, per_utt, word_mask, utt_mask)

    # ------------------------------------------------------------ attention

    def attend_step(self, enc: EncodedContext, s_prev):
        """One decode step's hierarchical attention.

        Sweeps utterances from the last (the message) to the first. Word
        attention over utterance ``i`` sees the decoder state and the
        utterance-level state ``l[i+1]`` already computed for later turns; the
        pooled vector then feeds the backward utterance GRU to give ``l[i]``.
        Returns ``(c_t, l_states, alpha [B, M, T], beta [B, M])``.
        """
        cfg = self.config
        s_prev = nx.as_traced(s_prev)
        B, M = enc.utt_mask.shape
        if s_prev.shape != (B, cfg.decoder_hidden):
            raise DimensionError(f"decoder state must be {(B, cfg.decoder_hidden)}, got {s_prev.shape}")
        s3 = nx.reshape(s_prev, (B, 1, cfg.decoder_hidden))
        l_next = nx.broadcast_to(self.params["utterance.l_init"], (B, cfg.utt_hidden))
        l_states = [None] * M
        alphas = [None] * M
        for i in reversed(range(M)):
            h_i = enc.per_utterance[i]
            wm = enc.word_mask[:, i]
            if self.word_scorer is None:
                alpha = nx.as_traced(_uniform(wm, cfg.dtype))
            else:
                args = [s3]
                if cfg.ablation != "no-ud-att":
                    args.append(nx.reshape(l_next, (B, 1, cfg.utt_hidden)))
                args.append(h_i)
                alpha = nx.masked_softmax(mlp_score(self.word_scorer, args), wm, allow_empty=True)
            pooled = nx.weighted_sum(alpha, h_i)
            l_i = nx.where(enc.utt_mask[:, i, None], gru_step(self.utterance_gru, pooled, l_next), l_next)
            l_states[i] = l_i
            alphas[i] = alpha
            l_next = l_i
        L = nx.stack(l_states, axis=1)
        if self.utt_scorer is None:
            beta = nx.as_traced(_uniform(enc.utt_mask, cfg.dtype))
        else:
            beta = nx.masked_softmax(mlp_score(self.utt_scorer, [s3, L]), enc.utt_mask)
        c_t = nx.weighted_sum(beta, L)
        alpha_np = np.stack([a.value for a in alphas], axis=1)
        return c_t, l_states, alpha_np, beta.value

    # ------------------------------------------------------------ decoder

    def decode_step(self, y_prev, s_prev, c_t):
        """Advance the decoder GRU on ``[emb(y_prev); c_t]`` and score the next token.

        Output distribution is ``log_softmax(W_out [s_t; emb(y_prev)])``.
        """
        y_prev = np.asarray(y_prev)
        e = embed_lookup(self.response_embedding, y_prev)
        s_t = gru_step(self.decoder_gru, nx.concat([e, nx.as_traced(c_t)], axis=-1), s_prev)
        logits = nx.linear(nx.concat([s_t, e], axis=-1), self.params["output.W"])
        if "output.b" in self.params:
            logits = nx.add(logits, nx.broadcast_to(self.params["output.b"], logits.shape))
        return s_t, nx.log_softmax(logits)

    def initial_state(self, batch_size: int) -> TracedValue:
        return nx.as_traced(np.zeros((batch_size, self.config.decoder_hidden), dtype=self.config.dtype))

    # ------------------------------------------------------------ objective

    def forward_nll(self, batch: Batch, with_trace: bool = False) -> NllResult:
        """Teacher-forced negative log-likelihood of the EOS-terminated responses."""
        rids = np.asarray(batch.response_ids)
        rmask = np.asarray(batch.response_mask, dtype=bool)
        if rids.ndim != 2 or rids.shape[1] < 1 or not rmask[:, 0].all():
            raise ContractError("every response needs at least one token (its EOS)")
        enc = self.encode_words(batch.context_ids, batch.word_mask, batch.utt_mask)
        B, R = rids.shape
        s = self.initial_state(B)
        y_prev = np.full(B, BOS, dtype=np.int64)
        step_logp = []
        records = []
        for t in range(R):
            c_t, _, alpha, beta = self.attend_step(enc, s)
            s, logp = self.decode_step(y_prev, s, c_t)
            step_logp.append(nx.pick(logp, rids[:, t]))
            if with_trace:
                records.append((alpha, beta))
            y_prev = rids[:, t]
        logp_rt = nx.where(rmask.T, nx.stack(step_logp, axis=0), np.zeros((R, B), dtype=self.config.dtype))
        per_example = nx.neg(nx.reduce_sum(logp_rt, axis=0))
        loss = nx.reduce_sum(per_example)
        traces = None
        if with_trace:
            traces = []
            for b in range(B):
                n_steps = int(rmask[b].sum())
                traces.append(AttentionTrace([
                    split_trace(alpha, beta, enc.word_mask, enc.utt_mask, b) for alpha, beta in records[:n_steps]
                ]))
        return NllResult(loss, per_example.value.copy(), int(rmask.sum()), traces)
