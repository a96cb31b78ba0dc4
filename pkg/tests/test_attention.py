import numpy as np
import pytest

from smattn import autodiff as ad
from smattn.attention import causal_attention, causal_mask, embed, positional_encoding
from smattn.autodiff import Tensor, grad_check
from smattn.data import EventSequence
from smattn.errors import ConfigError, VocabularyError
from smattn.model import Batch, ModelConfig, SMAttnModel


def _params(d_in=6, d=5, seed=0):
    rng = np.random.default_rng(seed)
    return {k: Tensor(rng.normal(size=(d_in, d))) for k in ("Wq", "Wk", "Wv")}


def test_pe_zero_position():
    Z = positional_encoding(4, 6)
    assert np.array_equal(Z[0], np.zeros(6))


def test_pe_direct_formula():
    Z = positional_encoding(2, 2, "position")
    assert abs(Z[1, 1] - np.cos(1.0)) < 1e-15
    assert abs(Z[1, 1] - 0.540302) < 1e-6


def test_pe_range_and_conventions():
    for conv in ("position", "dimension"):
        Z = positional_encoding(50, 26, conv)
        assert Z.shape == (50, 26) and np.all(np.abs(Z) <= 1)
    Zd = positional_encoding(3, 4, "dimension")
    # feature parity: even columns are sines
    assert abs(Zd[2, 2] - np.sin(2 / 10000 ** 0.5)) < 1e-15
    with pytest.raises(ConfigError):
        positional_encoding(3, 5)


def test_embed_single_and_widths():
    table = Tensor(np.arange(12.0).reshape(4, 3))
    Z = positional_encoding(1, 2)
    X = embed([2], table, Z).value
    assert X.shape == (1, 5)
    assert np.array_equal(X[0], np.concatenate([table.value[2], Z[0]]))


def test_embed_zero_table():
    Z = positional_encoding(3, 4)
    X = embed([0, 1, 1], Tensor(np.zeros((2, 3))), Z).value
    assert np.array_equal(X[:, :3], np.zeros((3, 3))) and np.array_equal(X[:, 3:], Z)


def test_embed_unknown_item():
    with pytest.raises(VocabularyError):
        embed([5], Tensor(np.zeros((2, 3))), positional_encoding(1, 2))


def test_single_event_point_mass():
    p = _params()
    X = Tensor(np.random.default_rng(1).normal(size=(1, 6)))
    out = causal_attention(X, p)
    assert np.array_equal(out.P.value, [[1.0]])
    assert np.allclose(out.H.value[0], (X.value @ p["Wv"].value)[0], rtol=0, atol=1e-15)


def test_identical_rows_split_evenly():
    p = _params()
    row = np.random.default_rng(2).normal(size=6)
    out = causal_attention(Tensor(np.stack([row, row])), p)
    assert np.allclose(out.P.value[1], [0.5, 0.5], rtol=0, atol=1e-15)


def test_naive_loop_oracle():
    p = _params(seed=3)
    X = np.random.default_rng(4).normal(size=(4, 6))
    out = causal_attention(Tensor(X), p)
    Wq, Wk, Wv = (p[k].value for k in ("Wq", "Wk", "Wv"))
    for j in range(4):
        q = X[j] @ Wq
        s = np.array([q @ (X[i] @ Wk) / np.sqrt(5) for i in range(j + 1)])
        w = np.exp(s - s.max())
        w /= w.sum()
        h = sum(w[i] * (X[i] @ Wv) for i in range(j + 1))
        assert np.max(np.abs(out.H.value[j] - h)) < 1e-12


def test_row_stochastic_and_causal():
    rng = np.random.default_rng(5)
    for L in (1, 3, 9):
        out = causal_attention(Tensor(rng.normal(size=(2, L, 6))), _params())
        P = out.P.value
        assert np.all(np.abs(P.sum(-1) - 1) < 1e-12)
        assert np.all(P[..., ~np.tril(np.ones((L, L), bool))] == 0.0)


def test_padding_mask():
    valid = np.array([[True, True, False]])
    m = causal_mask(3, valid)
    assert m[0].tolist() == [[True, False, False], [True, True, False], [True, True, False]]


def _model(seed=0, n=12):
    return SMAttnModel.initialize(ModelConfig(n_items=n, d_item=6, d_pos=4, d_model=10), seed)


def test_causality_under_future_perturbation():
    model = _model()
    rng = np.random.default_rng(6)
    for _ in range(50):
        L = int(rng.integers(2, 9))
        items = rng.integers(0, 12, L)
        times = np.cumsum(rng.exponential(1, L))
        j = int(rng.integers(0, L - 1))
        items2, times2 = items.copy(), times.copy()
        items2[j + 1:] = rng.integers(0, 12, L - j - 1)
        times2[j + 1:] = times[j] + np.cumsum(rng.exponential(1, L - j - 1))
        a = model.encode(Batch.from_sequences([EventSequence("u", times, items)]))
        b = model.encode(Batch.from_sequences([EventSequence("u", times2, items2)]))
        assert np.array_equal(a.H.value[0, :j + 1], b.H.value[0, :j + 1])
        assert np.array_equal(a.P.value[0, :j + 1], b.P.value[0, :j + 1])


def test_swap_changes_last_state():
    model = _model(1)
    s1 = EventSequence("u", [0, 1, 2, 3], [1, 4, 7, 2])
    s2 = EventSequence("u", [0, 1, 2, 3], [4, 1, 7, 2])
    h1 = model.encode(Batch.from_sequences([s1])).H.value[0, -1]
    h2 = model.encode(Batch.from_sequences([s2])).H.value[0, -1]
    assert not np.array_equal(h1, h2)


def test_padding_does_not_change_real_rows():
    model = _model(2)
    short = EventSequence("a", [0, 1], [3, 4])
    long = EventSequence("b", [0, 1, 2, 5], [1, 2, 3, 4])
    alone = model.encode(Batch.from_sequences([short])).H.value[0]
    padded = model.encode(Batch.from_sequences([short, long])).H.value[0, :2]
    assert np.array_equal(alone, padded)


def test_attention_gradients():
    rng = np.random.default_rng(7)
    X = rng.uniform(-1, 1, (2, 4, 6))
    readout = rng.normal(size=(4, 5))
    params = {k: Tensor(v.value * 0.5) for k, v in _params(seed=8).items()}
    params.update({"bq": Tensor(rng.normal(size=5)), "bk": Tensor(rng.normal(size=5)), "bv": Tensor(rng.normal(size=5))})
    rep = grad_check(lambda p: (ad.tanh(causal_attention(Tensor(X), p).H) * readout).sum(), params, 1e-5)
    # a key bias shifts every score of a row equally, so softmax ignores it and
    # its gradient is zero; relative error between two round-off values means nothing
    assert max(v for k, v in rep.per_param.items() if k != "bk") < 1e-4
    with ad.Tape() as tape:
        out = (ad.tanh(causal_attention(Tensor(X), params).H) * readout).sum()
    assert np.max(np.abs(tape.gradient(out, [params["bk"]])[0])) < 1e-12


def test_attention_input_gradient():
    rng = np.random.default_rng(9)
    p = _params(seed=10)

    def fn(q):
        H = causal_attention(q["X"], p).H
        return (H * H).sum()

    rep = grad_check(fn, {"X": Tensor(rng.uniform(-1, 1, (3, 6)))}, 1e-5)
    assert rep.worst_rel_error < 1e-4
