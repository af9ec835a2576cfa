import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hran.corpus import Example, Vocab, RESERVED  # noqa: E402
from hran.model import HRAN, ModelConfig  # noqa: E402

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {key}: {detail}")


@pytest.fixture
def criterion():
    """Record one acceptance line; usage: ``criterion("3 causality", ok, "detail")``."""

    def record(key, ok, detail=""):
        ACCEPTANCE[key] = (bool(ok), detail)
        assert ok, f"criterion {key} failed: {detail}"

    return record


def toy_vocab(n_words, prefix="w"):
    return Vocab(list(RESERVED) + [f"{prefix}{i}" for i in range(n_words)])


def tiny_config(**overrides):
    base = dict(context_vocab_size=20, response_vocab_size=20, word_hidden=5, utt_hidden=4,
                decoder_hidden=3, embed_dim=4, attn_dim=6, seed=7, max_decode_length=6)
    base.update(overrides)
    return ModelConfig(**base)


def random_context(rng, vocab_size, m=None, max_len=4, min_id=4):
    m = m or int(rng.integers(2, 5))
    return [list(rng.integers(min_id, vocab_size, size=int(rng.integers(1, max_len + 1)))) for _ in range(m)]


def scale_params(model, factor):
    for p in model.params.values():
        p.value = p.value * factor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return HRAN(tiny_config())


@pytest.fixture
def toy_examples():
    return [
        Example([["a", "b"], ["c", "d", "e"], ["f"]], ["x", "y"]),
        Example([["a"], ["b", "c"]], ["y", "z", "x"]),
        Example([["d", "e", "f", "g"], ["a"], ["b"], ["q"]], ["x"]),
    ]


def id_batch(pairs):
    """Batch from ``(context_ids, response_ids)`` pairs given as integer lists."""
    from hran.corpus import Batch, EOS, PAD

    B = len(pairs)
    M = max(len(c) for c, _ in pairs)
    T = max(len(u) for c, _ in pairs for u in c)
    R = max(len(r) for _, r in pairs) + 1
    ids = np.full((B, M, T), PAD, dtype=np.int64)
    wmask = np.zeros((B, M, T), dtype=bool)
    umask = np.zeros((B, M), dtype=bool)
    rids = np.full((B, R), PAD, dtype=np.int64)
    rmask = np.zeros((B, R), dtype=bool)
    for b, (ctx, resp) in enumerate(pairs):
        umask[b, : len(ctx)] = True
        for i, u in enumerate(ctx):
            ids[b, i, : len(u)] = u
            wmask[b, i, : len(u)] = True
        rids[b, : len(resp)] = resp
        rids[b, len(resp)] = EOS
        rmask[b, : len(resp) + 1] = True
    return Batch(ids, wmask, umask, rids, rmask)
