import json
import sys
import textwrap

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from querylife.corpus.data import TripletExample, collate
from querylife.corpus.synth import CATEGORIES, render_clean
from querylife.encoders import Tokenizer
from querylife.genfilt import (
    IMAGE_PROMPT,
    TITLE_PROMPT,
    GeneratedFeatures,
    GenFiltConfig,
    SimilarityIndex,
    SubprocessGenerator,
    SyntheticGenerator,
    filter_batch_labels,
    generate_features,
    jaccard,
    load_feature_cache,
    pair_similarity,
    precompute_features,
    read_responses,
    write_requests,
)

WORDS = ["red", "blue", "black", "silk", "cotton", "dress", "phone", "acme", "long", "short"]


def test_jaccard_examples():
    assert jaccard("red dress", "red dress") == 1.0
    assert jaccard("red dress", "blue phone") == 0.0
    assert jaccard("red silk dress", "red dress") == pytest.approx(2 / 3)
    assert jaccard("Red DRESS", "dress red") == 1.0
    assert jaccard("", "") == 1.0


def test_index_matrix_matches_scalar_jaccard():
    idx = SimilarityIndex("token-overlap")
    left = ["red dress", None, "blue silk dress"]
    right = ["red silk dress", "phone", None]
    m = idx.matrix(left, right)
    for i, a in enumerate(left):
        for j, b in enumerate(right):
            if a is None or b is None:
                assert np.isnan(m[i, j])
            else:
                assert m[i, j] == pytest.approx(jaccard(a, b))


def test_model_embedding_backend_is_cosine(tiny_model):
    tok = Tokenizer(WORDS, max_len=8)
    idx = SimilarityIndex("model-embedding", tiny_model, tok)
    assert idx.similarity("red dress", "red dress") == pytest.approx(1.0)
    assert -1.0 <= idx.similarity("red dress", "blue phone") <= 1.0
    with pytest.raises(ValueError):
        SimilarityIndex("model-embedding")


def _feat(pid, core="dress", color="red", caption="red dress", material=None, brand=None):
    return GeneratedFeatures(pid, core=core, material=material, brand=brand, color=color, caption=caption)


def test_generated_features_rules():
    f = _feat("p", material="silk", brand="acme")
    assert f.title_text() == "red silk dress acme"
    assert GeneratedFeatures.from_json(f.to_json()) == f
    with pytest.raises(ValueError):
        GeneratedFeatures("p", core="")
    with pytest.raises(ValueError):
        GeneratedFeatures("p")
    assert not GeneratedFeatures("p", status="failed").ok


def test_pair_similarity_kinds():
    idx = SimilarityIndex("token-overlap")
    a = _feat("a", caption="red dress")
    b = _feat("b", color="blue", caption="blue dress")
    assert pair_similarity("red dress", a, "Q-T", idx) == 1.0
    assert pair_similarity("blue dress", a, "Q-I", idx) == pytest.approx(1 / 3)
    assert pair_similarity(a, b, "I-T", idx) == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        pair_similarity("x", a, "T-T", idx)


# ------------------------------------------------------------------ filter

def _examples(rng, rows, stage="clicks"):
    """rows: (query, title, product_id, label)."""
    out = []
    for q, t, pid, lab in rows:
        out.append(TripletExample(q, t, rng.random((3, 8, 8)), pid, stage, label=lab))
    return out


def _dup_batch(rng, stage="clicks", labels=(None, None, None, None)):
    rows = [("red dress", "red dress", "p0", labels[0]),
            ("red dress", "red dress", "p1", labels[1]),
            ("blue phone", "blue phone", "p2", labels[2]),
            ("black dress", "black dress", "p3", labels[3])]
    batch = collate(_examples(rng, rows, stage), Tokenizer(WORDS, 8))
    feats = {"p0": _feat("p0"), "p1": _feat("p1"),
             "p2": _feat("p2", core="phone", color="blue", caption="blue phone"),
             "p3": _feat("p3", color="black", caption="black dress")}
    return batch, feats


def test_duplicate_query_false_negative_is_repaired(rng):
    batch, feats = _dup_batch(rng)
    qp, it, stats = filter_batch_labels(batch, feats, GenFiltConfig(threshold=0.9), SimilarityIndex("token-overlap"))
    expected = np.eye(4, dtype=int)
    expected[0, 1] = expected[1, 0] = 1
    np.testing.assert_array_equal(qp, expected)
    np.testing.assert_array_equal(it, expected)
    assert stats.query_product_flips == 2 and stats.image_title_flips == 2


def test_repaired_duplicate_effect_on_supcon(rng):
    """Identical duplicate queries: relabelling leaves the loss unchanged.

    Near duplicates whose cross similarities beat their own pairs: it drops.
    """
    from querylife.losses import supcon_loss
    from querylife.numerics import Tensor, precision

    batch, feats = _dup_batch(rng)
    qp, _, _ = filter_batch_labels(batch, feats, GenFiltConfig(threshold=0.9), SimilarityIndex("token-overlap"))
    e = np.eye(4)
    z = np.vstack([0.8 * e[0] + 0.6 * e[3], e[0], e[1], e[2]])
    same_q = np.vstack([e[0], e[0], e[1], e[2]])
    with precision("float64"):
        loss = lambda q, lab: supcon_loss(Tensor(q), Tensor(z), lab, 0.1).item()  # noqa: E731
        assert loss(same_q, qp) == pytest.approx(loss(same_q, batch.qp_labels), rel=1e-12)
        near_q = np.vstack([e[0], 0.6 * e[0] + 0.8 * e[3], e[1], e[2]])
        assert loss(near_q, qp) < loss(near_q, batch.qp_labels)


def test_mean_of_query_similarities_decides(rng):
    """Q-I 0.92 and Q-T 0.90 average to 0.91, which clears sigma 0.9."""
    batch, feats = _dup_batch(rng)
    for f in feats.values():
        f.caption = "caption " + f.caption

    class Table(SimilarityIndex):
        def matrix(self, left, right):
            value = 0.92 if right[0].startswith("caption") else 0.90
            return np.full((len(left), len(right)), value)

    cfg = GenFiltConfig(threshold=0.9, pair_kinds=("query-product",))
    qp, _, _ = filter_batch_labels(batch, feats, cfg, Table("token-overlap"))
    assert (qp == 1).all()
    qp, _, _ = filter_batch_labels(batch, feats, GenFiltConfig(threshold=0.915, pair_kinds=("query-product",)),
                                   Table("token-overlap"))
    np.testing.assert_array_equal(qp, batch.qp_labels)


def test_disabled_filter_is_identity(rng):
    batch, feats = _dup_batch(rng)
    qp, it, _ = filter_batch_labels(batch, feats, GenFiltConfig(enabled=False), SimilarityIndex("token-overlap"))
    np.testing.assert_array_equal(qp, batch.qp_labels)
    np.testing.assert_array_equal(it, batch.it_labels)


def test_annotated_entries_untouched(rng):
    batch, feats = _dup_batch(rng, stage="labeled", labels=(0, 1, 1, 1))
    qp, _, _ = filter_batch_labels(batch, feats, GenFiltConfig(threshold=0.9), SimilarityIndex("token-overlap"))
    # row 0 is a human-labelled negative for p0; query 0 vs product 1 is not annotated and flips
    assert qp[0, 0] == 0 and qp[0, 1] == 1
    # row 1 is labelled positive for p1; column 0 (p0) is not annotated by row 1
    assert qp[1, 0] == 1


def test_ungenerated_examples_are_skipped(rng):
    batch, feats = _dup_batch(rng)
    feats["p1"] = GeneratedFeatures("p1", status="failed")
    qp, it, stats = filter_batch_labels(batch, feats, GenFiltConfig(threshold=0.0), SimilarityIndex("token-overlap"))
    assert stats.skipped_examples == 1
    assert qp[:, 1].sum() == 1 and it[1].sum() == 1


@st.composite
def random_batch(draw):
    n = draw(st.integers(2, 7))
    seed = draw(st.integers(0, 2**31))
    r = np.random.default_rng(seed)
    colors, cores = ["red", "blue", "black"], ["dress", "phone"]
    rows, feats = [], {}
    for i in range(n):
        c, k = colors[r.integers(3)], cores[r.integers(2)]
        pid = f"p{r.integers(n)}"
        lab = int(r.integers(2)) if draw(st.booleans()) else None
        rows.append((f"{colors[r.integers(3)]} {k}", f"{c} {k}", pid, lab))
        feats.setdefault(pid, _feat(pid, core=k, color=c, caption=f"{colors[r.integers(3)]} {k}"))
    stage = "labeled" if all(x[3] is not None for x in rows) else "clicks"
    rows = [(q, t, p, (l if stage == "labeled" else None)) for q, t, p, l in rows]
    return collate(_examples(r, rows, stage), Tokenizer(WORDS, 8)), feats


@settings(max_examples=40, deadline=None)
@given(random_batch(), st.floats(0, 1), st.floats(0, 1))
def test_filter_properties(case, s1, s2):
    batch, feats = case
    lo, hi = sorted((s1, s2))
    idx = SimilarityIndex("token-overlap")
    qp_lo, it_lo, _ = filter_batch_labels(batch, feats, GenFiltConfig(threshold=lo), idx)
    qp_hi, it_hi, _ = filter_batch_labels(batch, feats, GenFiltConfig(threshold=hi), idx)
    # conservative: never removes a positive, never touches annotated entries
    assert (qp_lo >= batch.qp_labels).all() and (it_lo >= batch.it_labels).all()
    assert (qp_lo[batch.annotated] == batch.qp_labels[batch.annotated]).all()
    # a higher threshold flips a subset of what a lower one flips
    assert (qp_hi <= qp_lo).all() and (it_hi <= it_lo).all()
    # idempotent: filtering the corrected labels changes nothing
    batch.qp_labels, batch.it_labels = qp_lo, it_lo
    qp2, it2, stats = filter_batch_labels(batch, feats, GenFiltConfig(threshold=lo), idx)
    np.testing.assert_array_equal(qp2, qp_lo)
    np.testing.assert_array_equal(it2, it_lo)
    assert stats.query_product_flips == stats.image_title_flips == 0


def test_config_validation():
    assert GenFiltConfig(thresholds={"image-title": 0.5}).sigma("image-title") == 0.5
    assert GenFiltConfig(threshold=0.7).sigma("query-product") == 0.7
    for bad in ({"threshold": 1.5}, {"similarity_backend": "bm25"}, {"pair_kinds": ["q-q"]},
                {"thresholds": {"query-product": -0.1}}):
        with pytest.raises(ValueError):
            GenFiltConfig(**bad)


# -------------------------------------------------------------- generators

def test_synthetic_generator_reads_title_and_pixels():
    gen = SyntheticGenerator(image_size=16)
    f = gen.title_features("red silk dress best cheap")
    assert f["core"].endswith("dress") and f["color"] == "red" and f["material"] == "silk"
    img = render_clean("dress", {k: v[0] for k, v in _image_attrs("dress").items()}, 16)
    assert gen.caption(img).endswith("dress")


def _image_attrs(category):
    sch = CATEGORIES[category]
    return {k: sch.attributes[k] for k in sch.image_attrs}


def test_generation_failure_is_recorded():
    ex = TripletExample(None, "untitled thing", np.zeros((3, 16, 16)), "p9", "pairs")
    assert generate_features(ex, SyntheticGenerator(image_size=16)).status == "failed"


def test_feature_cache_round_trip(tmp_path):
    ex = [TripletExample(None, "red dress", np.full((3, 16, 16), 0.45), f"p{i}", "pairs") for i in range(2)]
    cache = tmp_path / "feat.jsonl"
    a = precompute_features([ex], SyntheticGenerator(image_size=16), cache)
    assert len(cache.read_text().splitlines()) == 2
    b = precompute_features([ex], SyntheticGenerator(image_size=16), cache)
    assert len(cache.read_text().splitlines()) == 2
    assert a == b == load_feature_cache(cache)


def test_prompts_are_templates():
    assert "{title}" in TITLE_PROMPT and "red dress" in TITLE_PROMPT.format(title="red dress")
    for word in ("core word", "material", "brand", "color"):
        assert word in TITLE_PROMPT
    assert IMAGE_PROMPT.endswith("few words.")


ECHO_GENERATOR = textwrap.dedent("""
    import json, sys
    for line in sys.stdin:
        r = json.loads(line)
        if r["kind"] == "title":
            words = r["payload"].split()
            out = {"id": r["id"], "status": "ok",
                   "features": {"core": words[-1], "color": words[0], "material": "NULL", "brand": None}}
        else:
            assert r["prompt"].startswith("Briefly")
            out = {"id": r["id"], "status": "ok", "caption": " Red Dress "}
        print(json.dumps(out), flush=True)
""")


def test_subprocess_generator(tmp_path):
    script = tmp_path / "gen.py"
    script.write_text(ECHO_GENERATOR)
    gen = SubprocessGenerator([sys.executable, str(script)])
    try:
        ex = TripletExample(None, "red dress", np.zeros((3, 8, 8)), "p0", "pairs", image_path="images/p0.png")
        f = generate_features(ex, gen)
    finally:
        gen.close()
    assert f == GeneratedFeatures("p0", core="dress", material=None, brand=None, color="red", caption="red dress")


def test_file_pair_mode(tmp_path):
    ex = [TripletExample(None, "red dress", np.zeros((3, 8, 8)), "p0", "pairs", image_path="a.png"),
          TripletExample(None, "red dress", np.zeros((3, 8, 8)), "p0", "pairs", image_path="a.png"),
          TripletExample(None, "blue phone", np.zeros((3, 8, 8)), "p1", "pairs", image_path="b.png")]
    req = tmp_path / "req.jsonl"
    assert write_requests(ex, req) == 4
    lines = [json.loads(l) for l in req.read_text().splitlines()]
    assert {l["kind"] for l in lines} == {"title", "image"}
    assert lines[0]["prompt"] == TITLE_PROMPT.format(title="red dress")
    resp = tmp_path / "resp.jsonl"
    resp.write_text("\n".join(json.dumps(r) for r in [
        {"id": "p0:title", "status": "ok", "features": {"core": "dress", "color": "red", "material": "NULL", "brand": "NULL"}},
        {"id": "p0:image", "status": "ok", "caption": "red dress"},
        {"id": "p1:title", "status": "ok", "features": {"core": "phone"}},
        {"id": "p1:image", "status": "error"},
    ]) + "\n")
    got = read_responses(resp)
    assert got["p0"] == GeneratedFeatures("p0", core="dress", color="red", caption="red dress")
    assert not got["p1"].ok
