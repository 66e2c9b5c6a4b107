import numpy as np
import pytest

from querylife.corpus.synth import CorpusConfig, generate_corpus
from querylife.encoders import EncoderConfig, QueryLifeModel

TINY = EncoderConfig(vocab_size=64, model_dim=8, num_layers=1, vit_layers=1, num_heads=2, ffn_dim=16,
                     max_text_len=8, image_size=8, patch_size=4, projection_dim=8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return QueryLifeModel(TINY, seed=3, dtype=np.float64)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    cfg = CorpusConfig(seed=5, counts=(160, 96, 64), eval_count=128, image_size=8, click_catalog=40)
    manifest = generate_corpus(cfg, out)
    return out, manifest


def tiny_run_config(data_dir, out_dir, **changes) -> dict:
    """The reference preset shrunk to a few seconds of training."""
    import json

    from querylife.config import preset_path

    d = json.loads(preset_path("reference").read_text())
    d["encoder"].update(model_dim=8, num_layers=1, vit_layers=1, ffn_dim=16, projection_dim=8, image_size=8)
    for s in d["schedule"]["stages"]:
        s.update(epochs=1, batch_size=8)
    d["corpus"].update(counts=[48, 32, 32], eval_count=40, image_size=8, click_catalog=12)
    d["eval"]["candidates"] = 20
    d["data_dir"], d["out_dir"] = str(data_dir), str(out_dir)
    for k, v in changes.items():
        d[k] = v
    return d


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    from querylife.cli import main

    out = tmp_path_factory.mktemp("tinydata")
    assert main(["gen-data", "--out-dir", str(out), "--seed", "2", "--counts", "48,32,32", "--eval-count", "40",
                 "--image-size", "8"]) == 0
    return out


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
