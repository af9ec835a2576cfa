"""Raw conversation ingestion, corpus filtering, vocabularies and batch encoding.

Raw format: one conversation per line, turns separated by TAB, tokens by single
spaces. Processed examples are stored as JSON Lines with ``context`` (list of
token lists) and ``response`` (token list).
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from hran.errors import ContextError, ContractError, EncodingError, FormatError, ParameterError

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<bos>", "<eos>")


@dataclass
class Conversation:
    turns: list


@dataclass
class Example:
    context: list
    response: list

    def __post_init__(self):
        if len(self.context) < 2:
            raise ContextError(f"a context needs at least 2 utterances, got {len(self.context)}")

    def to_json(self) -> str:
        return json.dumps({"context": self.context, "response": self.response}, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "Example":
        obj = json.loads(line)
        return cls(context=[list(u) for u in obj["context"]], response=list(obj["response"]))


@dataclass(frozen=True)
class FilterRules:
    min_turns: int = 3
    max_utterance_length: int = 50
    max_response_count: int = 50

    def __post_init__(self):
        if self.min_turns < 3:
            raise ParameterError("min_turns below 3 would produce contexts with fewer than 2 utterances")
        if self.max_utterance_length < 1 or self.max_response_count < 1:
            raise ParameterError("filter thresholds must be positive")


def _tokenize_line(line: str) -> Conversation:
    return Conversation([[tok for tok in turn.split(" ") if tok] for turn in line.split("\t")])


def parse_raw(text_lines: Iterable[str]) -> list:
    return [_tokenize_line(line) for line in text_lines if line.strip()]


def load_raw(path) -> list:
    """Read a raw TAB/space conversation file; blank lines are skipped."""
    convs = []
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            try:
                line = raw.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise EncodingError(f"invalid UTF-8 ({exc.reason})", line=lineno) from None
            line = line.rstrip("\r\n")
            if line.strip():
                convs.append(_tokenize_line(line))
    return convs


def filter_conversations(convs: Sequence[Conversation], rules: FilterRules = FilterRules()):
    """Apply the corpus filters and split survivors into context/response examples.

    Response frequencies are counted over the unfiltered input, so the rules
    commute. The tally counts every rule a conversation breaks; ``rejected`` is
    the number of distinct conversations dropped.
    """
    response_counts = Counter(tuple(c.turns[-1]) for c in convs if c.turns)
    tally = {"input": len(convs), "min_turns": 0, "max_utterance_length": 0,
             "max_response_count": 0, "empty_utterance": 0, "rejected": 0, "kept": 0}
    kept = []
    for conv in convs:
        broken = []
        if len(conv.turns) < rules.min_turns:
            broken.append("min_turns")
        if any(len(u) > rules.max_utterance_length for u in conv.turns):
            broken.append("max_utterance_length")
        if conv.turns and response_counts[tuple(conv.turns[-1])] > rules.max_response_count:
            broken.append("max_response_count")
        if any(len(u) == 0 for u in conv.turns):
            broken.append("empty_utterance")
        for rule in broken:
            tally[rule] += 1
        if broken:
            tally["rejected"] += 1
            continue
        kept.append(Example(context=[list(u) for u in conv.turns[:-1]], response=list(conv.turns[-1])))
    tally["kept"] = len(kept)
    return kept, tally


class Vocab:
    """Token/id mapping with ids 0..3 reserved for PAD, UNK, BOS, EOS."""

    def __init__(self, tokens: Sequence[str], coverage: float | None = None):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise FormatError(f"vocabulary must start with {RESERVED}")
        self.tokens = tokens
        self.index = {tok: i for i, tok in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise FormatError("vocabulary contains duplicate tokens")
        self.coverage = coverage

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def encode(self, tokens: Sequence[str]) -> list:
        return [self.index.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list:
        return [self.tokens[i] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        return cls([line for line in text.split("\n") if line != ""])


def build_vocab(examples: Sequence[Example], side: str, size: int) -> Vocab:
    """Keep the ``size`` most frequent tokens of one side; ties go to the lexicographically smaller token."""
    if size < 1:
        raise ParameterError("vocabulary size must be at least 1")
    if side == "context":
        counts = Counter(tok for ex in examples for utt in ex.context for tok in utt)
    elif side == "response":
        counts = Counter(tok for ex in examples for tok in ex.response)
    else:
        raise ParameterError(f"side must be 'context' or 'response', got {side!r}")
    for tok in RESERVED:
        counts.pop(tok, None)
    total = sum(counts.values())
    if total == 0:
        raise ContractError(f"no {side} tokens to build a vocabulary from")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:size]
    coverage = sum(c for _, c in ranked) / total
    return Vocab(list(RESERVED) + [tok for tok, _ in ranked], coverage=coverage)


@dataclass
class Batch:
    context_ids: np.ndarray  # [B, M, T]
    word_mask: np.ndarray  # [B, M, T]
    utt_mask: np.ndarray  # [B, M]
    response_ids: np.ndarray  # [B, R], EOS-terminated
    response_mask: np.ndarray  # [B, R]
    examples: list = field(default_factory=list, repr=False)

    def __len__(self):
        return self.context_ids.shape[0]

    @property
    def num_tokens(self) -> int:
        return int(self.response_mask.sum())


def encode_contexts(contexts: Sequence[Sequence[Sequence[str]]], context_vocab: Vocab):
    """Id-encode and pad a list of contexts to ``[B, M_max, T_max]`` with masks."""
    if not contexts:
        raise ContractError("cannot encode an empty list of contexts")
    for b, ctx in enumerate(contexts):
        if len(ctx) < 2:
            raise ContextError(f"context {b} has {len(ctx)} utterance(s); at least 2 are required")
        if any(len(u) == 0 for u in ctx):
            raise ContractError(f"context {b} contains an empty utterance")
    B = len(contexts)
    M = max(len(c) for c in contexts)
    T = max(len(u) for c in contexts for u in c)
    ids = np.full((B, M, T), PAD, dtype=np.int64)
    wmask = np.zeros((B, M, T), dtype=bool)
    umask = np.zeros((B, M), dtype=bool)
    for b, ctx in enumerate(contexts):
        umask[b, : len(ctx)] = True
        for i, utt in enumerate(ctx):
            ids[b, i, : len(utt)] = context_vocab.encode(utt)
            wmask[b, i, : len(utt)] = True
    return ids, wmask, umask


def encode_responses(responses: Sequence[Sequence[str]], response_vocab: Vocab):
    R = max(len(r) for r in responses) + 1
    ids = np.full((len(responses), R), PAD, dtype=np.int64)
    mask = np.zeros((len(responses), R), dtype=bool)
    for b, resp in enumerate(responses):
        ids[b, : len(resp)] = response_vocab.encode(resp)
        ids[b, len(resp)] = EOS
        mask[b, : len(resp) + 1] = True
    return ids, mask


def encode_batch(examples: Sequence[Example], context_vocab: Vocab, response_vocab: Vocab) -> Batch:
    if not examples:
        raise ContractError("cannot encode an empty batch")
    ids, wmask, umask = encode_contexts([ex.context for ex in examples], context_vocab)
    rids, rmask = encode_responses([ex.response for ex in examples], response_vocab)
    return Batch(ids, wmask, umask, rids, rmask, examples=list(examples))


def make_batches(examples: Sequence[Example], context_vocab: Vocab, response_vocab: Vocab, batch_size: int):
    return [
        encode_batch(examples[i : i + batch_size], context_vocab, response_vocab)
        for i in range(0, len(examples), batch_size)
    ]


def split_dataset(examples: Sequence[Example], rng: np.random.Generator, fractions=(0.8, 0.1, 0.1)):
    """Shuffle and cut into disjoint train/validation/test lists.

    When the fractions sum to one the test split takes the remainder, so the
    three lists partition the input exactly.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(not f > 0 for f in fractions) or sum(fractions) > 1 + 1e-9:
        raise ParameterError(f"fractions must be three positive numbers summing to at most 1, got {fractions}")
    n = len(examples)
    order = rng.permutation(n)
    n_train = math.floor(n * fractions[0] + 1e-9)
    n_valid = math.floor(n * fractions[1] + 1e-9)
    if abs(sum(fractions) - 1.0) <= 1e-9:
        n_test = n - n_train - n_valid
    else:
        n_test = math.floor(n * fractions[2] + 1e-9)
    cuts = np.cumsum([n_train, n_valid, n_test])
    shuffled = [examples[i] for i in order]
    return shuffled[: cuts[0]], shuffled[cuts[0] : cuts[1]], shuffled[cuts[1] : cuts[2]]


def read_examples(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(Example.from_json(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: bad example ({exc})") from None
    return out


def write_examples(path, examples: Iterable[Example]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(ex.to_json() + "\n")
