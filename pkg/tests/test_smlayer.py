import numpy as np
import pytest

from smattn import autodiff as ad
from smattn import smlayer
from smattn.autodiff import Tensor, grad_check
from smattn.data import EventSequence
from smattn.errors import DomainError, TemporalOrderError
from smattn.model import Batch, ModelConfig, SMAttnModel


def _mod_params(K=3, dg=4, d=5, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    return {
        "WG": Tensor(rng.normal(scale=scale, size=(K, dg, d))),
        "bG": Tensor(rng.normal(scale=scale, size=(K, dg))),
        "w": Tensor(rng.normal(scale=scale, size=(K, dg))),
        "mu": Tensor(rng.normal(scale=scale, size=K)),
        "log_phi": Tensor(rng.normal(scale=0.3, size=K)),
    }


def test_features_zero_elapsed():
    p = _mod_params()
    h = np.random.default_rng(1).normal(size=5)
    g = smlayer.modulator_features_at(h, 2.0, 2.0, p, 1).value
    assert np.array_equal(g, np.tanh(p["WG"].value[1] @ h))


def test_features_zero_params():
    p = _mod_params()
    p["WG"] = Tensor(np.zeros((3, 4, 5)))
    p["bG"] = Tensor(np.zeros((3, 4)))
    g = smlayer.modulator_features_at(np.ones(5), 7.0, 1.0, p, 0).value
    assert np.array_equal(g, np.zeros(4))


def test_features_hand_values():
    p = {"WG": Tensor(np.array([[[1.0, 0.0, -1.0], [0.5, 0.5, 0.5], [0.0, 2.0, 0.0]]])),
         "bG": Tensor(np.array([[0.1, -0.2, 0.0]])),
         "w": Tensor(np.zeros((1, 3))), "mu": Tensor(np.zeros(1)), "log_phi": Tensor(np.zeros(1))}
    h = np.array([0.3, -0.4, 0.2])
    g = smlayer.modulator_features_at(h, 3.0, 1.0, p, 0).value
    expected = [np.tanh(0.3 - 0.2 + 0.2), np.tanh(0.5 * 0.1 - 0.4), np.tanh(-0.8)]
    assert np.max(np.abs(g - expected)) < 1e-12


def test_intensity_base_values():
    p = _mod_params(K=1)
    p["w"] = Tensor(np.zeros((1, 4)))
    p["log_phi"] = Tensor(np.zeros(1))
    p["mu"] = Tensor(np.zeros(1))
    assert abs(smlayer.intensity(np.ones(5), 1.0, 0.0, p, 0).value - np.log(2)) < 1e-15
    p["mu"] = Tensor(np.array([3.0]))
    # log(1 + e^3), mpmath at 50 digits
    assert abs(smlayer.intensity(np.ones(5), 1.0, 0.0, p, 0).value - 3.0485873515737420588) < 1e-14


def test_intensity_positive_many_draws():
    rng = np.random.default_rng(2)
    for seed in range(100):
        p = _mod_params(seed=seed, scale=2.0)
        h = rng.normal(scale=3, size=(100, 5))
        dt = rng.exponential(5.0, 100)
        lam = smlayer.head_intensities(h, dt, p).value
        assert np.all(lam > 0)


def test_temporal_order():
    with pytest.raises(TemporalOrderError):
        smlayer.intensity(np.ones(5), 0.5, 1.0, _mod_params(), 0)


def test_constant_modulation_scores():
    rng = np.random.default_rng(3)
    params = {"B": Tensor(rng.normal(size=(6, 5)))}
    h = rng.normal(size=5)
    cand = [0, 2, 3, 5]
    p = smlayer.modulated_scores(h, 0.0, 1.0, params, cand, plain=True).value
    s = smlayer.modulated_scores(h, 0.0, 1.0, params, cand, constant_intensity=2.5).value
    assert np.array_equal(s, 2.5 * p)
    assert np.argmax(s) == np.argmax(p)
    assert list(np.argsort(-s, kind="stable")) == list(np.argsort(-p, kind="stable"))


def test_zero_intensity_annihilates():
    rng = np.random.default_rng(4)
    params = {"B": Tensor(rng.normal(size=(3, 5))), **_mod_params()}
    params["w"] = Tensor(np.zeros((3, 4)))
    params["log_phi"] = Tensor(np.zeros(3))
    params["mu"] = Tensor(np.array([0.0, -60.0, 0.0]))
    s = smlayer.modulated_scores(rng.normal(size=5), 0.0, 1.0, params, [0, 1, 2]).value
    assert s[1] < 1e-25 and s[0] > 0.1


def test_three_candidate_pipeline_oracle():
    rng = np.random.default_rng(5)
    params = {"B": Tensor(rng.normal(size=(3, 5))), **_mod_params(seed=6)}
    h = rng.normal(size=5)
    s = smlayer.modulated_scores(h, 1.0, 2.5, params, [2, 0, 1]).value
    expected = []
    z = np.array([params["B"].value[k] @ h for k in (2, 0, 1)])
    p = np.exp(z) / np.exp(z).sum()
    for idx, k in enumerate((2, 0, 1)):
        g = np.tanh(params["WG"].value[k] @ h + params["bG"].value[k] * 1.5)
        phi = np.exp(params["log_phi"].value[k])
        lam = phi * np.log1p(np.exp((params["w"].value[k] @ g + params["mu"].value[k]) / phi))
        expected.append(p[idx] * lam)
    assert np.max(np.abs(s - expected)) < 1e-12


def test_modulated_scores_gradient():
    rng = np.random.default_rng(7)
    params = {"B": Tensor(rng.normal(size=(3, 5))), **_mod_params(seed=8)}
    h = rng.normal(size=5)
    weights = rng.normal(size=3)
    mod = {k: params[k] for k in smlayer.MODULATOR_KEYS}
    rep = grad_check(lambda p: (smlayer.modulated_scores(h, 0.0, 1.3, {"B": params["B"], **p}, [0, 1, 2])
                                * weights).sum(), mod, 1e-5)
    assert rep.worst_rel_error < 1e-4


def _model(groups=None, n=6, seed=0):
    cfg = ModelConfig(n_items=n, d_item=4, d_pos=4, d_model=8, groups=groups)
    return SMAttnModel.initialize(cfg, seed)


def test_grid_stationary_for_constant_params():
    model = _model()
    params = dict(model.params)
    params["WG"] = Tensor(np.zeros(params["WG"].shape))
    params["bG"] = Tensor(np.zeros(params["bG"].shape))
    model = model.with_params(params)
    seq = EventSequence("u", [0.0, 1.0, 3.0], [0, 1, 2])
    lam = model.intensity_grid(seq, np.linspace(0, 3, 13))
    assert np.all(lam == lam[0])


def test_grid_single_event():
    model = _model()
    seq = EventSequence("u", [2.0], [3])
    lam = model.intensity_grid(seq, [2.0])
    h = model.encode(Batch.from_sequences([seq])).H.value[0, 0]
    assert np.array_equal(lam[0], smlayer.head_intensities(h, 0.0, model.params).value)


def test_grid_rejects_early_times():
    model = _model()
    with pytest.raises(DomainError):
        model.intensity_grid(EventSequence("u", [2.0, 3.0], [0, 1]), [1.0, 2.5])


def test_decreasing_exogenous_weights_monotone():
    model = _model(seed=1)
    params = dict(model.params)
    rng = np.random.default_rng(9)
    params["bG"] = Tensor(-np.abs(rng.normal(size=params["bG"].shape)))
    params["w"] = Tensor(np.abs(rng.normal(size=params["w"].shape)))
    model = model.with_params(params)
    seq = EventSequence("u", [0.0, 2.0, 5.0], [0, 1, 2])
    grid = np.linspace(2.0, 4.999, 200)
    lam = model.intensity_grid(seq, grid)
    assert np.all(np.diff(lam, axis=0) <= 0)


def test_time_sensitivity():
    model = _model(seed=2)
    seq = EventSequence("u", [0.0, 2.0, 5.0], [0, 1, 2])
    lam = model.intensity_grid(seq, [2.5, 3.5])
    assert np.all(lam[0] != lam[1])


def test_identity_groups_match_itemwise():
    a = _model()
    b = SMAttnModel(ModelConfig(n_items=6, d_item=4, d_pos=4, d_model=8, groups=tuple(range(6))), a.params)
    seq = EventSequence("u", [0.0, 1.0, 2.0], [5, 1, 2])
    assert np.array_equal(a.catalog_scores([seq], [3.0]), b.catalog_scores([seq], [3.0]))
    assert np.array_equal(a.intensity_grid(seq, [0.5, 1.5]), b.intensity_grid(seq, [0.5, 1.5]))


def test_constant_mode_ranking_equals_plain():
    cfg = ModelConfig(n_items=9, d_item=4, d_pos=4, d_model=8, modulation="constant", constant_intensity=0.37)
    model = SMAttnModel.initialize(cfg, 3)
    rng = np.random.default_rng(10)
    for _ in range(20):
        L = int(rng.integers(1, 6))
        seq = EventSequence("u", np.cumsum(rng.exponential(1, L)), rng.integers(0, 9, L))
        s = model.catalog_scores([seq], [seq.times[-1] + 1.0])[0]
        p = model.catalog_scores([seq], [seq.times[-1] + 1.0], plain=True)[0]
        assert list(np.lexsort((np.arange(9), -s))) == list(np.lexsort((np.arange(9), -p)))
