import hashlib
import json

import numpy as np
import pytest

from querylife.corpus import load_dataset, make_batches
from querylife.corpus.data import TripletExample, collate, initial_labels, num_batches
from querylife.corpus.synth import (
    CATEGORIES,
    CorpusConfig,
    ProductSpec,
    compose_title,
    duplicate_query_density,
    generate_corpus,
    load_image,
    render_clean,
    render_image,
    save_image,
    vocabulary,
)
from querylife.encoders import Tokenizer


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_generation_is_deterministic(tmp_path):
    cfg = CorpusConfig(seed=3, counts=(20, 15, 10), eval_count=10, image_size=8, click_catalog=8)
    generate_corpus(cfg, tmp_path / "a")
    generate_corpus(cfg, tmp_path / "b")
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    generate_corpus(CorpusConfig(seed=4, counts=(20, 15, 10), eval_count=10, image_size=8, click_catalog=8),
                    tmp_path / "c")
    assert _digest(tmp_path / "a") != _digest(tmp_path / "c")


def test_split_sizes_and_labels(small_corpus):
    root, manifest = small_corpus
    sizes = {n: len(load_dataset(root / f"{n}.jsonl")) for n in ("stage1", "stage2", "stage3", "eval")}
    assert sizes == {"stage1": 160, "stage2": 96, "stage3": 64, "eval": 128}
    ev = load_dataset(root / "eval.jsonl")
    assert {e.label for e in ev} == {0, 1}
    assert manifest["label_balance"] == {"stage3": 32, "eval": 64}
    assert all(e.query is None for e in load_dataset(root / "stage1.jsonl"))


def test_click_duplicate_density(small_corpus):
    _, manifest = small_corpus
    assert manifest["duplicate_query_density"] >= 0.2


def test_duplicate_density_examples():
    assert duplicate_query_density(["a", "b", "a", "c"]) == 0.5
    assert duplicate_query_density(["a", "b"]) == 0.0
    assert duplicate_query_density([]) == 0.0


def test_negatives_are_same_category_with_changed_queried_attribute(small_corpus):
    root, _ = small_corpus
    products = {json.loads(l)["product_id"]: json.loads(l) for l in (root / "products.jsonl").read_text().splitlines()}
    for e in load_dataset(root / "eval.jsonl"):
        p = products[e.product_id]
        words = e.query.split()
        assert words[-1] == p["category"]
        mismatched = [w for w in words[:-1] if w not in p["attrs"].values()]
        if e.label == 1:
            assert mismatched == []
        else:
            assert mismatched


def test_modality_routing():
    spec = ProductSpec("p", "dress", {"color": "red", "pattern": "striped", "material": "silk"}, "mira")
    rng = np.random.default_rng(0)
    for _ in range(20):
        title, _ = compose_title(spec, rng, noise_rate=0.0)
        assert "silk" in title.split() and "red" not in title.split() and "striped" not in title.split()
    leaked = [compose_title(spec, rng, 0.0, title_leak=1.0)[0].split() for _ in range(5)]
    assert all("red" in t and "striped" in t for t in leaked)
    # colour is image-routed for dresses, so two colours must render differently
    a = render_clean("dress", {"color": "red", "pattern": "plain"}, 16)
    b = render_clean("dress", {"color": "blue", "pattern": "plain"}, 16)
    assert np.abs(a - b).max() > 0.1
    # phones route nothing to the image
    assert CATEGORIES["phone"].image_attrs == ()
    p1 = render_clean("phone", {}, 16)
    assert p1.shape == (3, 16, 16)


def test_title_noise_flags():
    spec = ProductSpec("p", "monitor", {"color": "red", "screen": "27in", "refresh": "144hz"}, "lumex")
    rng = np.random.default_rng(1)
    flags = [f for _ in range(400) for f in compose_title(spec, rng, noise_rate=1.0)[1]]
    assert flags.count("keyword_stuffed") == 400
    assert 60 < flags.count("misleading") < 140
    assert all(not compose_title(spec, rng, 0.0)[1] for _ in range(50))


def test_png_round_trip_is_lossless(tmp_path):
    spec = ProductSpec("p", "dress", {"color": "red", "pattern": "checked", "material": "silk"}, "mira")
    img = render_image(spec, seed=0, size=16)
    assert img.min() >= 0 and img.max() <= 1
    save_image(img, tmp_path / "x.png")
    first = load_image(tmp_path / "x.png")
    save_image(first, tmp_path / "y.png")
    np.testing.assert_array_equal(load_image(tmp_path / "y.png"), first)
    assert np.abs(first - img).max() <= 0.5 / 255 + 1e-12
    save_image(img, tmp_path / "x.npy")
    np.testing.assert_allclose(load_image(tmp_path / "x.npy"), img, atol=1e-7)


def test_config_validation():
    for bad in ({"counts": (0, 1, 1)}, {"noise_rate": 2.0}, {"categories": ("shoe",)}, {"image_size": 10},
                {"image_format": "jpg"}, {"pair_title_leak": -0.1}, {"category_mix": (1.0,)}):
        with pytest.raises(ValueError):
            CorpusConfig(**bad).validate()


def test_vocabulary_covers_every_emitted_word(small_corpus):
    root, _ = small_corpus
    vocab = set(vocabulary())
    for split in ("stage1", "stage2", "stage3", "eval"):
        for e in load_dataset(root / f"{split}.jsonl"):
            assert set(e.title.split()) <= vocab
            assert e.query is None or set(e.query.split()) <= vocab


# ----------------------------------------------------------------- batching

def _ex(pid, label=None, stage="clicks", q="red dress"):
    return TripletExample(q, "red dress", np.zeros((3, 8, 8)), pid, stage, label=label)


def test_initial_labels():
    qp, it, ann = initial_labels([_ex("a", 1, "labeled"), _ex("b", 0, "labeled"), _ex("a", 0, "labeled")])
    np.testing.assert_array_equal(it, [[1, 0, 1], [0, 1, 0], [1, 0, 1]])
    np.testing.assert_array_equal(qp, [[1, 0, 1], [0, 0, 0], [0, 0, 0]])
    np.testing.assert_array_equal(ann, it.astype(bool))
    _, _, ann = initial_labels([_ex("a"), _ex("b")])
    assert not ann.any()


def test_collate_rejects_mixed_stages_and_empty():
    tok = Tokenizer(["red", "dress"])
    with pytest.raises(ValueError):
        collate([], tok)
    with pytest.raises(ValueError):
        collate([_ex("a"), _ex("b", 1, "labeled")], tok)


def test_make_batches_shuffle_and_drop_last():
    data = [_ex(f"p{i}") for i in range(10)]
    tok = Tokenizer(["red", "dress"])
    run = lambda e: [[x.product_id for x in b.examples] for b in make_batches(data, 4, seed=1, epoch=e, tokenizer=tok)]
    assert run(0) == run(0)
    assert run(0) != run(1)
    assert len(run(0)) == num_batches(10, 4) == 2
    kept = list(make_batches(data, 4, seed=1, drop_last=False, tokenizer=tok))
    assert [len(b) for b in kept] == [4, 4, 2] and num_batches(10, 4, False) == 3
    with pytest.raises(ValueError):
        list(make_batches(data, 1, seed=0, tokenizer=tok))
