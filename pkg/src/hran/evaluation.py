"""Perplexity, the add-one unigram floor, and the ablation harness."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from hran import numerics as nx
from hran.corpus import EOS, Batch, Example, Vocab, make_batches
from hran.errors import ContractError, HranError
from hran.model import HRAN, ModelConfig


def _total(values) -> float:
    total = 0.0
    for v in values:
        total += float(v)
    return total


@dataclass
class EvalReport:
    perplexity: float
    total_tokens: int
    per_example_nll: list
    normalization: str = "token"
    fingerprint: str = ""
    extra: dict = field(default_factory=dict)

    def recompute(self) -> float:
        denom = self.total_tokens if self.normalization == "token" else len(self.per_example_nll)
        return math.exp(_total(self.per_example_nll) / denom)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def batch_nll(model, batch: Batch):
    """Per-example NLL (numpy) and token count for anything that scores batches."""
    if isinstance(model, HRAN):
        with nx.no_grad():
            res = model.forward_nll(batch)
        return res.per_example, res.num_tokens
    return model.batch_nll(batch)


def perplexity(model, batches: Sequence[Batch], normalization: str = "token") -> EvalReport:
    """Corpus perplexity ``exp(total NLL / N)``.

    ``N`` is the number of response tokens including each EOS by default;
    ``normalization="example"`` divides by the number of examples instead.
    """
    if normalization not in ("token", "example"):
        raise ContractError(f"normalization must be 'token' or 'example', got {normalization!r}")
    if not batches:
        raise ContractError("perplexity needs at least one example")
    nlls, tokens, offset = [], 0, 0
    for batch in batches:
        try:
            per_example, n_tok = batch_nll(model, batch)
        except HranError as exc:
            raise ContractError(f"examples {offset}..{offset + len(batch) - 1}: {exc}") from exc
        nlls.extend(float(v) for v in per_example)
        tokens += int(n_tok)
        offset += len(batch)
    denom = tokens if normalization == "token" else len(nlls)
    ppl = math.exp(_total(nlls) / denom)
    fp = model.config.fingerprint() if isinstance(model, HRAN) else getattr(model, "fingerprint", "")
    return EvalReport(ppl, tokens, nlls, normalization, fp)


def evaluate_examples(model, examples: Sequence[Example], context_vocab: Vocab, response_vocab: Vocab,
                      batch_size: int = 32, normalization: str = "token") -> EvalReport:
    if not examples:
        raise ContractError("perplexity needs at least one example")
    return perplexity(model, make_batches(examples, context_vocab, response_vocab, batch_size), normalization)


class UnigramBaseline:
    """Context-free add-one-smoothed unigram model over the response vocabulary."""

    def __init__(self, counts: np.ndarray):
        self.counts = np.asarray(counts, dtype=np.int64)
        V = len(self.counts)
        self.total = int(self.counts.sum())
        self.probs = (self.counts + 1) / (self.total + V)
        self.logprobs = np.log(self.probs)
        self.fingerprint = f"unigram-{V}-{self.total}"

    def batch_nll(self, batch: Batch):
        lp = np.where(batch.response_mask, self.logprobs[batch.response_ids], 0.0)
        return -lp.sum(axis=1), int(batch.response_mask.sum())


def unigram_baseline(train: Sequence[Example], response_vocab: Vocab) -> UnigramBaseline:
    if not train:
        raise ContractError("unigram baseline needs training examples")
    counts = np.zeros(len(response_vocab), dtype=np.int64)
    for ex in train:
        for i in response_vocab.encode(ex.response):
            counts[i] += 1
        counts[EOS] += 1
    return UnigramBaseline(counts)


def run_ablation_suite(config: ModelConfig, train: Sequence[Example], valid: Sequence[Example],
                       schedule, context_vocab: Vocab, response_vocab: Vocab, variants=None) -> dict:
    """Train every ablation variant from the same seed and data.

    Returns ``{variant: {"perplexity": float | None, "parameters": int, "error": str | None}}``;
    a failing variant is recorded and the others still run.
    """
    from hran.training import fit

    table = {}
    for variant in variants or ("full", "no-ud-att", "no-word-att", "no-utt-att"):
        cfg = replace(config, ablation=variant)
        model = HRAN(cfg)
        row = {"perplexity": None, "parameters": model.num_parameters(), "error": None}
        try:
            report = fit(model, train, valid, schedule, context_vocab, response_vocab)
            row["perplexity"] = report.best_perplexity
        except HranError as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
        table[variant] = row
    return table
