import numpy as np
import pytest

from seqroute import autodiff as ad
from seqroute import router as rt
from seqroute.autodiff import Tensor
from seqroute.encoding import HashingTrigramEncoder, build_input_sequence, embed_text
from seqroute.errors import InputError


def small_config(**kw):
    base = dict(
        d_model=16, layers=2, heads=2, d_ff=32, embed_dim=24, max_roles=8, max_steps=5
    )
    base.update(kw)
    return rt.RouterConfig(**base)


@pytest.fixture
def params():
    return rt.RouterParams(small_config(), np.random.default_rng(0))


def _inputs(params, n_roles=3, n_hist=0, seed=1):
    rng = np.random.default_rng(seed)
    dim = params.config.embed_dim

    def unit():
        v = rng.normal(size=dim)
        return v / np.linalg.norm(v)

    q = unit()
    roles = [unit() for _ in range(n_roles)]
    hist = [np.concatenate([unit(), unit()]) for _ in range(n_hist)]
    return q, roles, hist


def test_contextual_encode_same_length(params):
    q, roles, hist = _inputs(params, n_roles=3, n_hist=0)
    seq = build_input_sequence(q, roles, hist, params.proj)
    out = rt.contextual_encode(params, seq)
    assert len(out.starred) == len(seq) == 6
    q, roles, hist = _inputs(params, n_roles=4, n_hist=3)
    seq = build_input_sequence(q, roles, hist, params.proj)
    assert len(rt.contextual_encode(params, seq).starred) == 10


def test_zeroed_blocks_give_positional_identity(params):
    for layer in params.layers:
        for t in layer.params("x").values():
            t.data[...] = 0.0
    q, roles, hist = _inputs(params, n_roles=2, n_hist=2)
    seq = build_input_sequence(q, roles, hist, params.proj)
    out = rt.contextual_encode(params, seq)
    ids = rt.position_ids(seq.slots, params.config)
    for i, t in enumerate(out.starred):
        expected = seq.tokens[i].data + params.pos.data[ids[i]]
        assert np.allclose(t.data, expected)


def test_full_attention_propagates_history_perturbation(params):
    q, roles, hist = _inputs(params, n_roles=3, n_hist=2)
    seq = build_input_sequence(q, roles, hist, params.proj)
    nap_a = rt.contextual_encode(params, seq).token(rt.NAP).data
    hist2 = [h.copy() for h in hist]
    hist2[0] = np.roll(hist2[0], 3)
    seq2 = build_input_sequence(q, roles, hist2, params.proj)
    nap_b = rt.contextual_encode(params, seq2).token(rt.NAP).data
    assert not np.allclose(nap_a, nap_b)


def test_shared_role_position_ids():
    cfg = small_config(shared_role_position=True)
    from seqroute.encoding import HIST, NAP, NCS, QUERY, ROLE, Slot

    slots = [Slot(QUERY), Slot(ROLE, 0), Slot(ROLE, 1), Slot(HIST, 1), Slot(HIST, 2),
             Slot(NAP), Slot(NCS)]
    assert rt.position_ids(slots, cfg) == [0, 1, 1, 2, 3, 6, 7]


# --- agent selection -------------------------------------------------------


def test_normalize_scores_known_values():
    scores, degenerate = rt.normalize_scores(Tensor([1.0, 2.0, 3.0]), alpha=1.5)
    assert not degenerate
    assert np.allclose(scores.data, [-1.83712, 0.0, 1.83712], atol=1e-5)


def test_normalize_scores_degenerate():
    scores, degenerate = rt.normalize_scores(Tensor([5.0, 5.0]), alpha=1.5)
    assert degenerate
    assert np.array_equal(scores.data, [0.0, 0.0])


def test_normalize_scores_single_candidate():
    scores, degenerate = rt.normalize_scores(Tensor([3.7]), alpha=1.5)
    assert not degenerate
    assert np.array_equal(scores.data, [0.0])


def test_normalize_scores_moments_and_argmax():
    rng = np.random.default_rng(11)
    for _ in range(300):
        n = int(rng.integers(2, 9))
        raw = rng.normal(size=n) * rng.uniform(0.5, 10)
        scores, degenerate = rt.normalize_scores(Tensor(raw), alpha=1.5)
        assert not degenerate
        assert abs(scores.data.mean()) < 1e-9
        assert abs(scores.data.std() - 1.5) < 1e-9
        assert int(np.argmax(scores.data)) == int(np.argmax(raw))


def test_select_agent_inference():
    assert rt.select_agent_inference(np.array([0.1, 0.9, 0.3])) == 1
    assert rt.select_agent_inference(np.array([0.5, 0.5])) == 0  # tie -> lowest
    assert rt.select_agent_inference(np.array([-1.84, 0.0, 1.84])) == 2


def test_select_agent_training_zero_noise_is_argmax():
    rng = np.random.default_rng(0)
    s = Tensor([0.2, 1.4, -0.3])
    k, lp = rt.select_agent_training(s, 1.0, rng, noise=np.zeros(3))
    assert k == 1
    probs = np.exp(s.data) / np.exp(s.data).sum()
    assert abs(float(lp.data) - np.log(probs[1])) < 1e-12


def test_select_agent_training_uniform_frequencies():
    rng = np.random.default_rng(42)
    s = Tensor([0.0, 0.0])
    hits = sum(rt.select_agent_training(s, 1.0, rng)[0] for _ in range(100_000))
    assert abs(hits / 100_000 - 0.5) < 0.01


def test_select_agent_training_softmax_oracle():
    rng = np.random.default_rng(7)
    s = Tensor([np.log(3.0), 0.0])
    n = 100_000
    first = sum(1 for _ in range(n) if rt.select_agent_training(s, 1.0, rng)[0] == 0)
    assert abs(first / n - 0.75) < 0.01


def test_gumbel_frequencies_chi_square():
    rng = np.random.default_rng(3)
    s = Tensor([0.7, -0.2, 1.1])
    temperature = 0.8
    n = 100_000
    counts = np.zeros(3)
    for _ in range(n):
        counts[rt.select_agent_training(s, temperature, rng)[0]] += 1
    z = s.data / temperature
    p = np.exp(z - z.max())
    p /= p.sum()
    chi2 = float(((counts - n * p) ** 2 / (n * p)).sum())
    assert chi2 < 13.8  # chi^2_{2 dof} at p=0.001


# --- context selection ------------------------------------------------------


def _encoded_pair(params, n_hist):
    q, roles, hist = _inputs(params, n_roles=3, n_hist=n_hist, seed=9)
    seq = build_input_sequence(q, roles, hist, params.proj)
    return rt.contextual_encode(params, seq)


def test_ncs_gate_identical_vectors():
    t = Tensor(np.array([0.3, -1.0, 2.0]))
    g = ad.sigmoid(ad.mul(rt._cosine(t, Tensor(t.data.copy())), 3.0))
    assert abs(float(g.data) - 0.952574) < 1e-6


def test_ncs_gate_orthogonal_vectors():
    a = Tensor([1.0, 0.0])
    b = Tensor([0.0, 2.0])
    g = ad.sigmoid(ad.mul(rt._cosine(a, b), 3.0))
    assert abs(float(g.data) - 0.5) < 1e-12


def test_ncs_gates_empty_history(params):
    encoded = _encoded_pair(params, 0)
    assert rt.ncs_gates(encoded, 3.0) == []


def test_ncs_gates_within_sigmoid_beta_band(params):
    beta = 3.0
    lo, hi = 1 / (1 + np.exp(beta)), 1 / (1 + np.exp(-beta))
    for n_hist in (1, 2, 4):
        encoded = _encoded_pair(params, n_hist)
        for g in rt.ncs_gates(encoded, beta):
            assert lo <= float(g.data) <= hi
            assert 0.0 < float(g.data) < 1.0


def test_select_context_inference_threshold():
    mask = rt.select_context_inference(np.array([0.3, 0.6, 0.9]), eta=0.5)
    assert mask.tolist() == [False, True, True]


def test_select_context_inference_window_cap():
    mask = rt.select_context_inference(np.array([0.9, 0.9, 0.9]), eta=0.5, window_cap=2)
    assert mask.tolist() == [False, True, True]


def test_select_context_inference_empty():
    assert rt.select_context_inference(np.array([]), eta=0.5).tolist() == []


def test_eta_monotonicity():
    rng = np.random.default_rng(5)
    for _ in range(50):
        g = rng.uniform(0.05, 0.95, size=rng.integers(1, 6))
        etas = sorted(rng.uniform(0.01, 0.99, size=2))
        low = rt.select_context_inference(g, eta=etas[0])
        high = rt.select_context_inference(g, eta=etas[1])
        assert not np.any(high & ~low)


class _ScriptedRng:
    def __init__(self, values):
        self._values = list(values)

    def random(self):
        return self._values.pop(0)


def test_select_context_training_logprob_definition():
    gates = [ad.sigmoid(Tensor(np.log(4.0))), ad.sigmoid(Tensor(np.log(0.4 / 0.6)))]
    assert abs(float(gates[0].data) - 0.8) < 1e-12
    assert abs(float(gates[1].data) - 0.4) < 1e-12
    mask, lp = rt.select_context_training(gates, _ScriptedRng([0.5, 0.9]))
    assert mask.tolist() == [True, False]
    assert abs(float(lp.data) - (np.log(0.8) + np.log(0.6))) < 1e-12


def test_select_context_training_empty():
    mask, lp = rt.select_context_training([], np.random.default_rng(0))
    assert mask.size == 0
    assert float(lp.data) == 0.0


def test_select_context_training_bernoulli_rate():
    rng = np.random.default_rng(123)
    g = [ad.sigmoid(Tensor(0.0))]  # gate exactly 0.5
    n = 100_000
    hits = sum(int(rt.select_context_training(g, rng)[0][0]) for _ in range(n))
    assert abs(hits / n - 0.5) < 0.01


def test_select_context_training_window_exclusion():
    gates = [ad.sigmoid(Tensor(5.0)), ad.sigmoid(Tensor(5.0)), ad.sigmoid(Tensor(5.0))]
    mask, lp = rt.select_context_training(gates, _ScriptedRng([0.0, 0.0]), window_cap=2)
    assert mask.tolist()[0] is False
    # only two in-window terms contribute
    expected = 2 * np.log(float(gates[1].data))
    assert abs(float(lp.data) - expected) < 1e-12


# --- policy object ----------------------------------------------------------


class _Role:
    def __init__(self, rid, prompt):
        self.id = rid
        self.role_prompt = prompt


def test_router_policy_decide_modes(params):
    encoder = HashingTrigramEncoder(params.config.embed_dim)
    policy = rt.RouterPolicy(params, encoder)
    catalog = [_Role("a", "You are alpha."), _Role("b", "You are bravo.")]
    rng = np.random.default_rng(0)

    d_inf = policy.decide("solve it", catalog, [], "infer", rng)
    assert d_inf.nap_logprob is None
    assert d_inf.mask.size == 0
    d_inf2 = policy.decide("solve it", catalog, [], "infer", rng)
    assert d_inf2.role_index == d_inf.role_index
    assert np.array_equal(d_inf2.scores, d_inf.scores)

    d_tr = policy.decide("solve it", catalog, [], "train", rng)
    assert d_tr.nap_logprob is not None
    assert float(d_tr.ncs_logprob.data) == 0.0

    d_forced = policy.decide("solve it", catalog, [], "train", rng, force_role=1)
    assert d_forced.role_index == 1 and d_forced.forced
    assert d_forced.nap_logprob is None


def test_router_policy_rejects_oversized_catalog(params):
    encoder = HashingTrigramEncoder(params.config.embed_dim)
    policy = rt.RouterPolicy(params, encoder)
    catalog = [_Role(str(i), f"role {i}") for i in range(params.config.max_roles + 1)]
    with pytest.raises(InputError):
        policy.decide("q", catalog, [], "infer", np.random.default_rng(0))


def test_router_config_validation():
    with pytest.raises(InputError):
        small_config(d_model=10, heads=4)
    with pytest.raises(InputError):
        small_config(eta=1.5)
    with pytest.raises(InputError):
        small_config(temperature=0.0)
    with pytest.raises(InputError):
        small_config(window_cap=0)
