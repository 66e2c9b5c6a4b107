import numpy as np
import pytest

from querylife.config import config_from_dict
from querylife.corpus.training import (
    LOG_COLUMNS,
    StageConfig,
    TrainingAborted,
    checkpoint_path,
    read_log,
    run_training_schedule,
)
from querylife.encoders import QueryLifeModel
from querylife.numerics import checkpoint

from conftest import tiny_run_config


def _run(cfg, out, **kw):
    return run_training_schedule(cfg.encoder, cfg.losses, cfg.schedule.stages, cfg.schedule.optimizer,
                                 cfg.data_dir, out, cfg.seed, genfilt=cfg.genfilt, **kw)


def _cfg(data, tmp_path, **changes):
    return config_from_dict(tiny_run_config(data, tmp_path, **changes))


def test_identical_runs_give_identical_logs(tiny_data, tmp_path):
    cfg = _cfg(tiny_data, tmp_path)
    a = _run(cfg, tmp_path / "a")
    b = _run(cfg, tmp_path / "b")
    la, lb = read_log(tmp_path / "a" / "train_log.csv"), read_log(tmp_path / "b" / "train_log.csv")
    assert list(la[0]) == list(LOG_COLUMNS)
    assert la == lb and len(la) == len(a.log_rows)
    assert a.hashes == b.hashes
    assert {int(r["stage"]) for r in la} == {1, 2, 3}
    stage1 = [r for r in la if r["stage"] == "1"]
    assert all(float(r["qmm"]) == 0.0 and float(r["itc"]) > 0 for r in stage1)


def test_seed_changes_the_run(tiny_data, tmp_path):
    a = _run(_cfg(tiny_data, tmp_path), tmp_path / "a", stages=(1,))
    b = _run(_cfg(tiny_data, tmp_path, seed=1), tmp_path / "b", stages=(1,))
    assert a.hashes[1] != b.hashes[1]


def test_float64_mode(tiny_data, tmp_path):
    cfg = _cfg(tiny_data, tmp_path, precision="float64")
    _run(cfg, tmp_path, stages=(1,), precision="float64")
    _, header = checkpoint.load(checkpoint_path(tmp_path, 1))
    assert header["precision"] == "float64"


def test_nan_abort_keeps_last_good_parameters(tiny_data, tmp_path):
    cfg = _cfg(tiny_data, tmp_path)
    cfg.schedule.optimizer.max_lr = 1e30
    cfg.schedule.optimizer.warmup_fraction = 0.0
    with pytest.raises(TrainingAborted, match="last good"):
        _run(cfg, tmp_path, stages=(1,))
    good = QueryLifeModel.load(tmp_path / "last_good.ckpt")
    assert all(np.isfinite(v).all() for v in good.state_dict().values())


def test_stage_checks(tiny_data, tmp_path):
    cfg = _cfg(tiny_data, tmp_path)
    with pytest.raises(ValueError):
        _run(cfg, tmp_path, stages=(4,))
    with pytest.raises(FileNotFoundError):
        _run(cfg, tmp_path / "empty", stages=(3,))
    with pytest.raises(ValueError):
        StageConfig("x.jsonl", epochs=1, batch_size=1)
    small = _cfg(tiny_data, tmp_path)
    small.encoder.vocab_size = 10
    with pytest.raises(ValueError, match="vocab"):
        _run(small, tmp_path / "v", stages=(1,))


def test_zero_epoch_stage_copies_parameters(tiny_data, tmp_path):
    cfg = _cfg(tiny_data, tmp_path)
    cfg.schedule.stages[1].epochs = 0
    _run(cfg, tmp_path, stages=(1, 2))
    a, _ = checkpoint.load(checkpoint_path(tmp_path, 1))
    b, _ = checkpoint.load(checkpoint_path(tmp_path, 2))
    assert all(np.array_equal(a[k], b[k]) for k in a)
