import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from querylife.corpus.data import TripletExample, collate
from querylife.encoders import Tokenizer
from querylife.losses import (
    LossConfig,
    binary_match_loss,
    itc_loss,
    matching_pairs,
    mine_hard_negatives,
    stage_weights,
    supcon_loss,
    total_loss,
)
from querylife.numerics import Graph, Tensor, no_grad, precision

from conftest import TINY


def _unit(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _oracle_directional(a, b, pos, tau):
    """Loop-based mean over anchors of mean -log softmax over positives (rows of a vs b)."""
    total, anchors = 0.0, 0
    for i in range(a.shape[0]):
        logits = [float(a[i] @ b[j]) / tau for j in range(b.shape[0])]
        m = max(logits)
        lse = m + math.log(sum(math.exp(v - m) for v in logits))
        ps = [j for j in range(b.shape[0]) if pos[i][j]]
        if not ps:
            continue
        total += sum(lse - logits[j] for j in ps) / len(ps)
        anchors += 1
    return total / anchors


@st.composite
def contrastive_case(draw):
    n = draw(st.integers(1, 6))
    d = draw(st.integers(2, 6))
    seed = draw(st.integers(0, 2**31))
    tau = draw(st.floats(0.05, 2.0))
    rng = np.random.default_rng(seed)
    pos = (rng.random((n, n)) < 0.35).astype(int)
    np.fill_diagonal(pos, 1)
    return _unit(rng, n, d), _unit(rng, n, d), pos, tau


@settings(max_examples=60, deadline=None)
@given(contrastive_case())
def test_itc_matches_loop_oracle(case):
    a, b, pos, tau = case
    with precision("float64"):
        got = itc_loss(Tensor(a), Tensor(b), tau, pos).item()
    want = 0.5 * (_oracle_directional(a, b, pos, tau) + _oracle_directional(b, a, pos.T, tau))
    assert got == pytest.approx(want, rel=1e-9, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(contrastive_case())
def test_supcon_matches_loop_oracle(case):
    q, z, pos, tau = case
    with precision("float64"):
        got = supcon_loss(Tensor(q), Tensor(z), pos, tau).item()
    assert got == pytest.approx(_oracle_directional(q, z, pos, tau), rel=1e-9, abs=1e-9)


def test_itc_closed_forms():
    with precision("float64"):
        e = Tensor(np.eye(2))
        # orthogonal pairs with tau=1: -log(e/(e+1))
        assert itc_loss(e, e, 1.0).item() == pytest.approx(math.log(1 + math.e ** -1))
        same = Tensor(np.ones((4, 2)) / math.sqrt(2))
        assert itc_loss(same, same, 0.07).item() == pytest.approx(math.log(4))
        one = Tensor(np.array([[1.0, 0.0]]))
        assert itc_loss(one, one, 0.5).item() == pytest.approx(0.0, abs=1e-12)


def test_supcon_all_positive_identical_is_log_n():
    with precision("float64"):
        z = Tensor(np.ones((4, 3)) / math.sqrt(3))
        assert supcon_loss(z, z, np.ones((4, 4)), 0.1).item() == pytest.approx(math.log(4))
        with pytest.raises(ValueError):
            supcon_loss(z, z, np.zeros((4, 4)), 0.1)


def test_anchor_without_positive_is_excluded():
    rng = np.random.default_rng(0)
    q, z = _unit(rng, 3, 4), _unit(rng, 3, 4)
    pos = np.eye(3, dtype=int)
    pos[2, 2] = 0
    with precision("float64"):
        got = supcon_loss(Tensor(q), Tensor(z), pos, 0.5).item()
    two_anchor_mean = 0.5 * (_oracle_directional(q[:1], z, pos[:1], 0.5) + _oracle_directional(q[1:2], z, pos[1:2], 0.5))
    assert got == pytest.approx(two_anchor_mean)


def test_itc_gradient_is_zero_at_uniform_optimum():
    with precision("float64"):
        x = Tensor(np.ones((3, 2)) / math.sqrt(2), requires_grad=True, name="x")
        with Graph() as g:
            loss = itc_loss(x, Tensor(x.data.copy()), 0.1, np.ones((3, 3)))
        np.testing.assert_allclose(g.backward(loss)["x"], 0.0, atol=1e-12)


def test_binary_match_loss_examples():
    with precision("float64"):
        assert binary_match_loss(Tensor(np.zeros((5, 2))), np.array([0, 1, 1, 0, 1])).item() == pytest.approx(math.log(2))
        confident = Tensor(np.array([[0.0, 30.0], [30.0, 0.0]]))
        assert binary_match_loss(confident, np.array([1, 0])).item() == pytest.approx(0.0, abs=1e-12)
        with pytest.raises(ValueError):
            binary_match_loss(Tensor(np.zeros((3, 2))), np.array([1, 0]))


def test_mining_argmax_and_exclusions():
    sim = np.array([[9.0, 5.0, 7.0], [1.0, 9.0, 2.0], [3.0, 3.0, 9.0]])
    pos = np.eye(3, dtype=int)
    out = mine_hard_negatives(sim, pos, "argmax", np.random.default_rng(0))
    assert out.tolist() == [2, 2, 0]
    pos[0, 2] = 1
    assert mine_hard_negatives(sim, pos, "argmax", np.random.default_rng(0))[0] == 1
    full = np.ones((3, 3), dtype=int)
    assert (mine_hard_negatives(sim, full, "sample-proportional", np.random.default_rng(0)) == -1).all()
    with pytest.raises(ValueError):
        mine_hard_negatives(sim, pos, "uniform", np.random.default_rng(0))


def test_mining_frequencies_follow_softmax():
    """Candidates at similarity 2 and 0 should be drawn at odds e^2 : 1."""
    sim = np.array([[5.0, 2.0, 0.0]])
    rng = np.random.default_rng(42)
    draws = np.array([mine_hard_negatives(sim, np.array([[1, 0, 0]]), "sample-proportional", rng, False)[0]
                      for _ in range(100_000)])
    p1 = (draws == 1).mean()
    expected = math.e**2 / (math.e**2 + 1)
    assert (draws != 0).all()
    assert abs(p1 - expected) < 4 * math.sqrt(expected * (1 - expected) / len(draws))


def test_matching_pairs_layout():
    pairs = matching_pairs(3, np.array([1, 0, 1]), np.array([2, -1, 0]), np.array([1, 2, -1]))
    assert pairs.text_idx.tolist() == [0, 1, 2, 0, 2, 1, 2]
    assert pairs.image_idx.tolist() == [0, 1, 2, 2, 0, 0, 1]
    assert pairs.targets.tolist() == [1, 0, 1, 0, 0, 0, 0]


def test_loss_config_validation():
    assert LossConfig(weights={"itc": 2}).weights["qmm"] == 1.0
    for bad in ({"temperature": 0}, {"weights": {"foo": 1}}, {"weights": {"itc": -1}},
                {"hard_negative_mode": "x"}, {"qmm_mining": "x"}):
        with pytest.raises(ValueError):
            LossConfig(**bad)


def test_stage_one_is_itc_only():
    w = stage_weights(LossConfig(), 1)
    assert w["itc"] == 1.0 and sum(w.values()) == 1.0
    assert stage_weights(LossConfig(weights={"qmc": 0.0}), 2)["qmc"] == 0.0


# ----------------------------------------------------------- full objective

def _batch(rng, labels, stage="labeled"):
    tok = Tokenizer(["red", "blue", "dress", "phone", "monitor"], max_len=TINY.max_text_len)
    words = ["red dress", "blue phone", "red monitor", "blue dress"]
    ex = []
    for i, lab in enumerate(labels):
        ex.append(TripletExample(query=words[(i + 1) % 4], title=words[i % 4], image=rng.random((3, 8, 8)),
                                 product_id=f"p{i % 3}", stage=stage, label=lab))
    return collate(ex, tok, np.float64)


def test_total_loss_breakdown_and_stage(tiny_model, rng):
    batch = _batch(rng, [1, 0, 1, 1])
    cfg = LossConfig()
    with no_grad():
        tot1, b1 = total_loss(tiny_model, batch, cfg, 1, np.random.default_rng(0))
        tot2, b2 = total_loss(tiny_model, batch, cfg, 2, np.random.default_rng(0))
    assert b1.itm == b1.qmc == 0.0 and b1.total == pytest.approx(b1.itc)
    assert all(v > 0 for v in b2.terms().values())
    assert tot2.item() == pytest.approx(sum(b2.terms().values()))
    assert b2.total == pytest.approx(tot2.item())


def test_zero_weight_terms_are_reported_zero(tiny_model, rng):
    batch = _batch(rng, [1, 1, 0, 1])
    cfg = LossConfig(weights={"qic": 0, "qtc": 0, "qmc": 0})
    with no_grad():
        _, b = total_loss(tiny_model, batch, cfg, 2, np.random.default_rng(0))
    assert b.qic == b.qtc == b.qmc == 0.0 and b.qmm > 0


def test_all_negative_batch_skips_alignment(tiny_model, rng):
    batch = _batch(rng, [0, 0, 0])
    with no_grad():
        _, b = total_loss(tiny_model, batch, LossConfig(), 3, np.random.default_rng(0))
    assert b.stats["qma_skipped"] == 1 and b.qmc == 0.0 and b.qmm > 0


def test_queries_required_after_stage_one(tiny_model, rng):
    tok = Tokenizer(["red"], max_len=4)
    ex = [TripletExample(None, "red", rng.random((3, 8, 8)), f"p{i}", "pairs") for i in range(2)]
    with pytest.raises(ValueError, match="queries"):
        total_loss(tiny_model, collate(ex, tok), LossConfig(), 2, np.random.default_rng(0))
