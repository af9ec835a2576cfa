import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hran import numerics as nx
from hran.errors import ContractError, DimensionError, VocabularyError
from hran.layers import Embedding, GruParams, MlpScorerParams, bigru_encode, embed_lookup, gru_step, mlp_score
from hran.numerics import TracedValue

NAMES = ("W_z", "W_r", "W_s", "V_z", "V_r", "V_s")


def make_gru(rng, hidden, inp, scale=0.5):
    shapes = [(hidden, inp)] * 3 + [(hidden, hidden)] * 3
    return GruParams(*(TracedValue(rng.normal(size=s) * scale, requires_grad=True) for s in shapes))


def zero_gru(hidden, inp):
    shapes = [(hidden, inp)] * 3 + [(hidden, hidden)] * 3
    return GruParams(*(TracedValue(np.zeros(s), requires_grad=True) for s in shapes))


def scalar_gru(p, x, h):
    """Pure-Python loops over lists of floats."""
    W = {n: getattr(p, n).value.tolist() for n in NAMES}
    H, I = len(h), len(x)
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    z = [sig(sum(W["W_z"][i][k] * x[k] for k in range(I)) + sum(W["V_z"][i][k] * h[k] for k in range(H))) for i in range(H)]
    r = [sig(sum(W["W_r"][i][k] * x[k] for k in range(I)) + sum(W["V_r"][i][k] * h[k] for k in range(H))) for i in range(H)]
    hr = [h[k] * r[k] for k in range(H)]
    s = [math.tanh(sum(W["W_s"][i][k] * x[k] for k in range(I)) + sum(W["V_s"][i][k] * hr[k] for k in range(H))) for i in range(H)]
    return [(1 - z[i]) * s[i] + z[i] * h[i] for i in range(H)]


# ---------------------------------------------------------------- embeddings


def test_embedding_row_and_gradient(rng):
    table = TracedValue(rng.normal(size=(6, 3)), requires_grad=True)
    emb = Embedding(table)
    assert np.array_equal(embed_lookup(emb, np.array([0])).value[0], table.value[0])
    nx.reduce_sum(embed_lookup(emb, np.array([4]))).backward()
    want = np.zeros((6, 3))
    want[4] = 1.0
    assert np.array_equal(table.grad, want)


def test_embedding_repeated_token_doubles_gradient(rng):
    table = TracedValue(rng.normal(size=(6, 3)), requires_grad=True)
    nx.reduce_sum(embed_lookup(Embedding(table), np.array([2, 2]))).backward()
    assert table.grad[2].tolist() == [2.0, 2.0, 2.0]


def test_embedding_out_of_range():
    emb = Embedding(TracedValue(np.zeros((3, 2))))
    with pytest.raises(VocabularyError):
        embed_lookup(emb, np.array([-1]))


# ---------------------------------------------------------------- GRU


def test_gru_zero_weights_halves_state():
    p = zero_gru(2, 3)
    out = gru_step(p, np.array([1.0, -4.0, 2.0]), np.array([0.6, -0.2]))
    assert np.array_equal(out.value, [0.3, -0.1])


def test_gru_saturated_update_gate_copies_state():
    p = zero_gru(2, 1)
    p.W_z.value = np.full((2, 1), 1000.0)
    h = np.array([0.25, -0.75])
    assert np.array_equal(gru_step(p, np.array([1.0]), h).value, h)


def test_gru_matches_scalar_oracle(rng):
    p = make_gru(rng, 4, 3)
    x, h = rng.normal(size=3), rng.normal(size=4) * 0.5
    got = gru_step(p, x, h).value
    assert np.allclose(got, scalar_gru(p, x.tolist(), h.tolist()), rtol=0, atol=1e-12)


def test_gru_batched_equals_rowwise(rng):
    p = make_gru(rng, 3, 2)
    x, h = rng.normal(size=(5, 2)), rng.normal(size=(5, 3))
    batched = gru_step(p, x, h).value
    for i in range(5):
        assert np.allclose(batched[i], gru_step(p, x[i], h[i]).value, rtol=0, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_gru_state_is_a_convex_combination(seed):
    rng = np.random.default_rng(seed)
    p = make_gru(rng, 3, 2, scale=2.0)
    x, h = rng.normal(size=2) * 3, rng.uniform(-1, 1, size=3)
    out = gru_step(p, x, h).value
    z = nx.sigmoid(p.W_z.value @ x + p.V_z.value @ h).value
    s = np.tanh(p.W_s.value @ x + p.V_s.value @ (h * nx.sigmoid(p.W_r.value @ x + p.V_r.value @ h).value))
    lo, hi = np.minimum(s, h), np.maximum(s, h)
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)
    assert np.all(np.abs(out) <= 1 + 1e-12)
    assert np.all((0 <= z) & (z <= 1))


def test_gru_dimension_checks(rng):
    p = make_gru(rng, 3, 2)
    with pytest.raises(DimensionError):
        gru_step(p, np.zeros(3), np.zeros(3))
    with pytest.raises(DimensionError):
        gru_step(p, np.zeros(2), np.zeros(2))
    with pytest.raises(DimensionError):
        GruParams(*(TracedValue(np.zeros((3, 2))) for _ in range(3)), *(TracedValue(np.zeros((3, 2))) for _ in range(3)))


def test_gru_gradients(rng):
    p = make_gru(rng, 3, 2)
    x = TracedValue(rng.normal(size=(2, 2)), requires_grad=True)
    h = TracedValue(rng.normal(size=(2, 3)) * 0.5, requires_grad=True)
    leaves = [getattr(p, n) for n in NAMES] + [x, h]
    assert nx.grad_check(lambda: nx.reduce_sum(nx.tanh(gru_step(p, x, h))), leaves) < 1e-6


# ---------------------------------------------------------------- BiGRU


def _bigru_setup(rng, vocab=7, hidden=3, dim=2):
    emb = Embedding(TracedValue(rng.normal(size=(vocab, dim)), requires_grad=True))
    fwd, bwd = make_gru(rng, hidden, dim), make_gru(rng, hidden, dim)
    h0f = TracedValue(rng.normal(size=hidden) * 0.1, requires_grad=True)
    h0b = TracedValue(rng.normal(size=hidden) * 0.1, requires_grad=True)
    return emb, fwd, bwd, h0f, h0b


def test_bigru_single_token(rng):
    emb, fwd, bwd, h0f, h0b = _bigru_setup(rng)
    states, _ = bigru_encode(fwd, bwd, emb, np.array([5]), np.array([True]), h0f, h0b)
    x = emb.table.value[5]
    want = np.concatenate([gru_step(fwd, x, h0f.value).value, gru_step(bwd, x, h0b.value).value])
    assert states.shape == (1, 6)
    assert np.array_equal(states.value[0], want)


def test_bigru_matches_unrolled_oracle(rng):
    emb, fwd, bwd, h0f, h0b = _bigru_setup(rng)
    ids = [4, 1, 6]
    states, _ = bigru_encode(fwd, bwd, emb, np.array(ids), np.ones(3, bool), h0f, h0b)
    E = emb.table.value
    f1 = scalar_gru(fwd, E[4].tolist(), h0f.value.tolist())
    f2 = scalar_gru(fwd, E[1].tolist(), f1)
    f3 = scalar_gru(fwd, E[6].tolist(), f2)
    b3 = scalar_gru(bwd, E[6].tolist(), h0b.value.tolist())
    b2 = scalar_gru(bwd, E[1].tolist(), b3)
    b1 = scalar_gru(bwd, E[4].tolist(), b2)
    want = np.array([f1 + b1, f2 + b2, f3 + b3])
    assert np.allclose(states.value, want, rtol=0, atol=1e-12)


def test_bigru_direction_symmetry(rng):
    emb, fwd, _, h0f, _ = _bigru_setup(rng)
    ids = np.array([3, 5, 2, 6])
    mask = np.ones(4, bool)
    a, _ = bigru_encode(fwd, fwd, emb, ids, mask, h0f, h0f)
    b, _ = bigru_encode(fwd, fwd, emb, ids[::-1].copy(), mask, h0f, h0f)
    H = 3
    assert np.array_equal(a.value[:, :H], b.value[::-1, H:])
    assert np.array_equal(a.value[:, H:], b.value[::-1, :H])


def test_bigru_zero_parameters(rng):
    emb = Embedding(TracedValue(np.zeros((5, 2))))
    z = zero_gru(3, 2)
    h0 = TracedValue(np.zeros(3))
    states, _ = bigru_encode(z, z, emb, np.array([1, 2]), np.ones(2, bool), h0, h0)
    assert not states.value.any()


def test_bigru_padding_does_not_change_real_positions(rng):
    emb, fwd, bwd, h0f, h0b = _bigru_setup(rng)
    plain, _ = bigru_encode(fwd, bwd, emb, np.array([4, 5]), np.ones(2, bool), h0f, h0b)
    padded, _ = bigru_encode(fwd, bwd, emb, np.array([[4, 5, 0, 0]]), np.array([[True, True, False, False]]), h0f, h0b)
    assert np.array_equal(plain.value, padded.value[0, :2])


def test_bigru_padding_gets_no_embedding_gradient(rng):
    emb, fwd, bwd, h0f, h0b = _bigru_setup(rng)
    states, _ = bigru_encode(fwd, bwd, emb, np.array([[4, 5, 6]]), np.array([[True, True, False]]), h0f, h0b)
    nx.reduce_sum(nx.select(nx.select(states, 0, 0), 1, 0)).backward()
    assert not emb.table.grad[6].any()


def test_bigru_rejects_empty_sequence(rng):
    emb, fwd, bwd, h0f, h0b = _bigru_setup(rng)
    with pytest.raises(ContractError):
        bigru_encode(fwd, bwd, emb, np.zeros((1, 0), dtype=int), np.zeros((1, 0), bool), h0f, h0b)


def test_bigru_gradients(rng):
    emb, fwd, bwd, h0f, h0b = _bigru_setup(rng)
    leaves = [emb.table, h0f, h0b] + [getattr(fwd, n) for n in NAMES] + [getattr(bwd, n) for n in NAMES]
    ids, mask = np.array([[4, 1, 6], [2, 3, 0]]), np.array([[True] * 3, [True, True, False]])
    f = lambda: nx.reduce_sum(nx.tanh(bigru_encode(fwd, bwd, emb, ids, mask, h0f, h0b)[0]))
    assert nx.grad_check(f, leaves) < 1e-6


# ---------------------------------------------------------------- MLP scorer


def _scorer(rng, dims, attn=4):
    return MlpScorerParams(
        [TracedValue(rng.normal(size=(attn, d)), requires_grad=True) for d in dims],
        TracedValue(rng.normal(size=attn), requires_grad=True),
    )


def test_mlp_score_zero_arguments_and_zero_readout(rng):
    p = _scorer(rng, (3, 2))
    assert mlp_score(p, [np.zeros(3), np.zeros(2)]).value == 0.0
    p.v.value = np.zeros(4)
    assert mlp_score(p, [rng.normal(size=3), rng.normal(size=2)]).value == 0.0


def test_mlp_score_matches_scalar_oracle(rng):
    p = _scorer(rng, (3, 2))
    a, b = rng.normal(size=3), rng.normal(size=2)
    P1, P2, v = (t.value.tolist() for t in (*p.projections, p.v))
    want = sum(
        v[k] * math.tanh(sum(P1[k][i] * a[i] for i in range(3)) + sum(P2[k][i] * b[i] for i in range(2)))
        for k in range(4)
    )
    assert math.isclose(float(mlp_score(p, [a, b]).value), want, rel_tol=0, abs_tol=1e-12)


def test_mlp_score_broadcasts_over_positions(rng):
    p = _scorer(rng, (3, 2, 5))
    s, l, h = rng.normal(size=(2, 1, 3)), rng.normal(size=(2, 1, 2)), rng.normal(size=(2, 4, 5))
    scores = mlp_score(p, [s, l, h]).value
    assert scores.shape == (2, 4)
    for b in range(2):
        for j in range(4):
            single = mlp_score(p, [s[b, 0], l[b, 0], h[b, j]]).value
            assert math.isclose(scores[b, j], float(single), rel_tol=0, abs_tol=1e-14)


def test_mlp_score_arity_mismatch(rng):
    with pytest.raises(ContractError):
        mlp_score(_scorer(rng, (3, 2)), [np.zeros(3)])


def test_mlp_score_gradients(rng):
    p = _scorer(rng, (3, 2))
    a = TracedValue(rng.normal(size=(4, 3)), requires_grad=True)
    b = TracedValue(rng.normal(size=(4, 2)), requires_grad=True)
    leaves = [*p.projections, p.v, a, b]
    assert nx.grad_check(lambda: nx.reduce_sum(mlp_score(p, [a, b])), leaves) < 1e-6


def test_attention_pooling_is_a_convex_combination(rng):
    p = _scorer(rng, (3, 5))
    h = rng.normal(size=(6, 5))
    alpha = nx.masked_softmax(mlp_score(p, [rng.normal(size=(1, 3)), h]))
    r = nx.weighted_sum(alpha, h).value
    assert abs(alpha.value.sum() - 1) < 1e-12
    assert np.all(r >= h.min(axis=0) - 1e-12) and np.all(r <= h.max(axis=0) + 1e-12)
