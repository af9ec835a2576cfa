"""Greedy and beam-search response generation.

Both decoders drive a *step function*: given the decoder states of the live
hypotheses and their last emitted tokens, it returns the new states and a
``[n, V]`` array of next-token log-probabilities. :class:`HranStepper` adapts a
trained model to that protocol; tests plug in hand-written toy distributions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from hran import numerics as nx
from hran.corpus import BOS, EOS, PAD, UNK
from hran.errors import ContextError, ContractError, ParameterError
from hran.model import HRAN, AttentionTrace, EncodedContext, split_trace

NEG_INF = -np.inf


@dataclass
class Hypothesis:
    tokens: tuple
    logprob: float
    state: object
    finished: bool = False


def suppress_tokens(logprobs: np.ndarray, banned: Sequence[int]) -> np.ndarray:
    """Copy of ``logprobs`` with the banned ids (last axis) set to -inf."""
    out = np.array(logprobs, dtype=np.float64, copy=True)
    if len(banned):
        out[..., list(banned)] = NEG_INF
    return out


def banned_tokens(allow_unk: bool = False, extra: Sequence[int] = ()) -> tuple:
    """PAD and BOS are never emitted; UNK only when explicitly allowed."""
    banned = [PAD, BOS] + ([] if allow_unk else [UNK]) + list(extra)
    return tuple(sorted(set(banned)))


def context_arrays(context: Sequence[Sequence[int]]):
    """Pack one id-encoded context into batch-of-one arrays."""
    if len(context) < 2:
        raise ContextError(f"a context needs at least 2 utterances, got {len(context)}")
    if any(len(u) == 0 for u in context):
        raise ContextError("a context utterance is empty")
    M, T = len(context), max(len(u) for u in context)
    ids = np.full((1, M, T), PAD, dtype=np.int64)
    mask = np.zeros((1, M, T), dtype=bool)
    for i, u in enumerate(context):
        ids[0, i, : len(u)] = u
        mask[0, i, : len(u)] = True
    return ids, mask, np.ones((1, M), dtype=bool)


class HranStepper:
    """Step function over a single encoded context for any number of hypotheses."""

    def __init__(self, model: HRAN, context: Sequence[Sequence[int]]):
        self.model = model
        ids, wmask, umask = context_arrays(context)
        with nx.no_grad():
            self.enc = model.encode_words(ids, wmask, umask)
        self._tiles = {1: self.enc}
        self.last_attention = None

    def initial_state(self) -> np.ndarray:
        return np.zeros(self.model.config.decoder_hidden, dtype=self.model.config.dtype)

    def _tiled(self, n: int) -> EncodedContext:
        if n not in self._tiles:
            e = self.enc
            rep = lambda a: np.repeat(a, n, axis=0)
            self._tiles[n] = EncodedContext(
                nx.as_traced(rep(e.states.value)),
                [nx.as_traced(rep(u.value)) for u in e.per_utterance],
                rep(e.word_mask),
                rep(e.utt_mask),
            )
        return self._tiles[n]

    def __call__(self, states, prev_tokens):
        enc = self._tiled(len(states))
        with nx.no_grad():
            c_t, _, alpha, beta = self.model.attend_step(enc, np.stack(states))
            s_t, logp = self.model.decode_step(np.asarray(prev_tokens, dtype=np.int64), np.stack(states), c_t)
        self.last_attention = (alpha, beta, enc)
        return list(s_t.value), logp.value.astype(np.float64)


def _rank_key(h: Hypothesis, length_normalize: bool):
    score = h.logprob / max(len(h.tokens), 1) if length_normalize else h.logprob
    return (-score, h.tokens)


def beam_search_steps(
    step: Callable,
    initial_state,
    width: int,
    nbest: int,
    max_length: int,
    banned: Sequence[int] = (),
    eos: int = EOS,
    bos: int = BOS,
    length_normalize: bool = False,
) -> list:
    """Beam search over an arbitrary step function; returns finished :class:`Hypothesis` objects.

    Every live hypothesis is expanded by every token; the ``width`` best
    candidates by cumulative log-probability survive, ties going to the
    lexicographically smaller token sequence. A candidate ending in EOS or
    reaching ``max_length`` tokens retires to the pool and stops competing.
    """
    if width < 1:
        raise ParameterError(f"beam width must be at least 1, got {width}")
    if not 1 <= nbest <= width:
        raise ParameterError(f"n-best must be between 1 and the beam width, got {nbest}")
    if max_length < 1:
        raise ParameterError("max_length must be at least 1")
    live = [Hypothesis((), 0.0, initial_state)]
    pool = []
    while live:
        states, logp = step([h.state for h in live], [h.tokens[-1] if h.tokens else bos for h in live])
        logp = suppress_tokens(logp, banned)
        totals = np.array([h.logprob for h in live])[:, None] + logp
        flat = totals.ravel()
        finite = np.isfinite(flat)
        if not finite.any():
            break
        k = min(width, int(finite.sum()))
        threshold = np.partition(flat[finite], -k)[-k]
        cand = np.flatnonzero(finite & (flat >= threshold))
        V = logp.shape[1]
        ranked = sorted(
            ((float(flat[c]), live[c // V].tokens + (int(c % V),), c // V) for c in cand),
            key=lambda t: (-t[0], t[1]),
        )[:width]
        live = []
        for score, tokens, parent in ranked:
            done = tokens[-1] == eos or len(tokens) >= max_length
            hyp = Hypothesis(tokens, score, states[parent], done)
            (pool if done else live).append(hyp)
    if not pool:
        pool = live
    pool.sort(key=lambda h: _rank_key(h, length_normalize))
    return pool[:nbest]


def _strip(tokens: tuple, eos: int = EOS) -> list:
    return list(tokens[:-1]) if tokens and tokens[-1] == eos else list(tokens)


def beam_search(
    model: HRAN,
    context: Sequence[Sequence[int]],
    width: int = 10,
    nbest: int = 1,
    max_length: int | None = None,
    allow_unk: bool = False,
    length_normalize: bool = False,
) -> list:
    """n-best responses as ``(token_ids, logprob)`` pairs, best first; EOS is stripped."""
    if width < 1:
        raise ParameterError(f"beam width must be at least 1, got {width}")
    stepper = HranStepper(model, context)
    hyps = beam_search_steps(
        stepper, stepper.initial_state(), width, nbest,
        max_length or model.config.max_decode_length,
        banned=banned_tokens(allow_unk), length_normalize=length_normalize,
    )
    return [(_strip(h.tokens), h.logprob) for h in hyps]


def greedy_steps(step: Callable, initial_state, max_length: int, banned: Sequence[int] = (),
                 eos: int = EOS, bos: int = BOS, on_step: Callable | None = None):
    """Pick the highest-scoring next token until EOS or ``max_length``; ties go to the smallest id."""
    tokens, total, state = [], 0.0, initial_state
    while True:
        states, logp = step([state], [tokens[-1] if tokens else bos])
        if on_step is not None:
            on_step()
        scores = total + suppress_tokens(logp, banned)[0]
        if not np.isfinite(scores).any():
            raise ContractError("every token is banned")
        tok = int(np.argmax(scores))
        tokens.append(tok)
        total, state = float(scores[tok]), states[0]
        if tok == eos or len(tokens) >= max_length:
            return tokens, total


def greedy_decode(
    model: HRAN,
    context: Sequence[Sequence[int]],
    max_length: int | None = None,
    allow_unk: bool = False,
):
    """Greedy response plus its attention trace; returns ``(token_ids, logprob, trace)``."""
    stepper = HranStepper(model, context)
    trace = AttentionTrace()

    def record():
        alpha, beta, enc = stepper.last_attention
        trace.steps.append(split_trace(alpha, beta, enc.word_mask, enc.utt_mask, 0))

    tokens, logprob = greedy_steps(
        stepper, stepper.initial_state(), max_length or model.config.max_decode_length,
        banned=banned_tokens(allow_unk), on_step=record,
    )
    return _strip(tuple(tokens)), logprob, trace
