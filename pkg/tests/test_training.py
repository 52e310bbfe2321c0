import json
import math
from dataclasses import replace

import numpy as np
import pytest

from also_ssl import formats, rng
from also_ssl.lidar import SceneConfig, SensorModel
from also_ssl.model import AlsoModel
from also_ssl.training import (
    DataConfig,
    FileScenes,
    MetricsReport,
    PretrainConfig,
    SyntheticScenes,
    TrainingDiverged,
    _adamw_state,
    evaluate_occupancy,
    pretrain,
    threshold_sweep,
    train_step,
)
import also_ssl.training as training

TINY = dict(epochs=2, supports_per_scan=32, max_queries=256, max_points=2048, batch_size=2)


@pytest.fixture
def small_stream(small_scene_config, small_sensor):
    return SyntheticScenes(small_scene_config, small_sensor, seed=3)


class BalancedQueries:
    """Wraps a stream so every query set has as many full as empty queries."""

    def __init__(self, stream):
        self.stream = stream

    def scan(self, i):
        return self.stream.scan(i)

    def queries(self, i, delta, mode):
        qs = self.stream.queries(i, delta, mode)
        full = np.nonzero(qs.occupancy == 1)[0]
        empty = np.nonzero(qs.occupancy == 0)[0]
        n = min(len(full), len(empty))
        g = rng.generator(("balanced", i))
        keep = np.sort(np.concatenate([g.choice(full, n, replace=False), g.choice(empty, n, replace=False)]))
        return replace(
            qs,
            positions=qs.positions[keep],
            occupancy=qs.occupancy[keep],
            intensity=qs.intensity[keep],
            kind=qs.kind[keep],
            source_index=qs.source_index[keep],
        )


def _params(model):
    return {k: v.copy() for k, v in model.params().items()}


def test_pretrain_is_bitwise_deterministic(small_stream):
    cfg = PretrainConfig(**TINY)
    m1, s1, r1 = pretrain(cfg, small_stream, range(4))
    m2, s2, r2 = pretrain(cfg, SyntheticScenes(small_stream.scene_config, small_stream.sensor, 3), range(4))
    for k, v in _params(m1).items():
        assert np.array_equal(v, m2.params()[k]), k
    assert r1.curves == r2.curves
    assert r1.metrics["steps"] == 4


def test_single_scene_single_epoch_twice_identical(small_stream):
    cfg = PretrainConfig(**dict(TINY, epochs=1))
    a = _params(pretrain(cfg, small_stream, [0])[0])
    b = _params(pretrain(cfg, small_stream, [0])[0])
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_seed_changes_the_run(small_stream):
    a = pretrain(PretrainConfig(**TINY), small_stream, range(2))[0]
    b = pretrain(PretrainConfig(**dict(TINY, seed=1)), small_stream, range(2))[0]
    assert not np.array_equal(a.params()["decoder.0.weight"], b.params()["decoder.0.weight"])


@pytest.mark.parametrize("seed", range(5))
def test_step_zero_occupancy_loss_near_ln2_on_balanced_queries(seed):
    stream = BalancedQueries(SyntheticScenes(SceneConfig(), SensorModel(), seed=0))
    cfg = PretrainConfig(seed=seed)
    res = train_step(AlsoModel(seed), _adamw_state(cfg), stream, [0, 1], 0, cfg, 0)
    assert abs(res.occupancy - math.log(2)) <= 0.15


def test_training_reduces_loss(small_stream):
    cfg = PretrainConfig(**dict(TINY, epochs=12, batch_size=4))
    _, _, rep = pretrain(cfg, small_stream, range(4))
    loss = rep.curves["loss"]
    assert np.mean(loss[-3:]) < np.mean(loss[:3])


def test_bev_supports_train(small_stream):
    cfg = PretrainConfig(**dict(TINY, support_mode="bev", bev_pitch=1.0))
    model, _, rep = pretrain(cfg, small_stream, range(2))
    assert all(np.isfinite(v) for v in rep.curves["loss"])
    assert np.abs(model.params()["encoder.point.0.weight"] - AlsoModel(0).params()["encoder.point.0.weight"]).max() > 0


def test_divergence_dumps_state(small_stream, tmp_path, monkeypatch):
    real = training.train_step

    def failing(model, state, stream, indices, epoch, cfg, step):
        if step == 1:
            raise TrainingDiverged(f"non-finite loss at step {step}")
        return real(model, state, stream, indices, epoch, cfg, step)

    monkeypatch.setattr(training, "train_step", failing)
    with pytest.raises(TrainingDiverged, match="dumped"):
        pretrain(PretrainConfig(**TINY), small_stream, range(4), checkpoint_dir=tmp_path)
    dump = tmp_path / "diverged_step000001.ckpt"
    _, _, meta = formats.read_checkpoint(dump)
    assert meta["step"] == 1


def test_periodic_checkpoints(small_stream, tmp_path):
    cfg = PretrainConfig(**dict(TINY, checkpoint_every=1))
    model, _, _ = pretrain(cfg, small_stream, range(2), checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch0001.ckpt", "epoch0002.ckpt"]
    restored, _, _ = formats.load_model(tmp_path / "epoch0002.ckpt", AlsoModel(7))
    for k, v in model.params().items():
        assert np.array_equal(v, restored.params()[k])


def test_zero_logit_model_scores_the_empty_fraction(small_stream):
    model = AlsoModel(0)
    last = model.decoder.layers[-1]
    last.weight[...] = 0
    last.bias[...] = 0
    m = evaluate_occupancy(model, small_stream, range(50, 53), PretrainConfig(**TINY)).metrics
    # probability 0.5 everywhere, thresholded with ">" -> every query is called empty
    full_fraction = 1 - m["query_accuracy"]
    assert m["query_recall"] == 0
    assert m["query_accuracy"] == pytest.approx(max(full_fraction, 1 - full_fraction))
    assert m["query_accuracy"] == pytest.approx(m["majority_baseline"])


def test_evaluation_reports_label_noise(small_stream):
    model = pretrain(PretrainConfig(**TINY), small_stream, range(2))[0]
    m = evaluate_occupancy(model, small_stream, range(50, 52), PretrainConfig(**TINY)).metrics
    assert 0 < m["coverage"] <= 1
    assert abs(m["query_accuracy"] - m["true_accuracy"]) <= m["label_noise_rate"] + 1e-12


def test_threshold_sweep_recall_is_monotone():
    g = np.random.default_rng(0)
    truth = g.random(500) < 0.4
    prob = np.clip(truth * 0.3 + g.random(500) * 0.7, 0, 1)
    rows = threshold_sweep(prob, truth, np.linspace(0, 1, 21))
    recall = [r["recall"] for r in rows]
    assert all(a >= b for a, b in zip(recall, recall[1:]))


def test_data_ranges_must_be_disjoint():
    DataConfig().check_disjoint()
    with pytest.raises(ValueError, match="overlap"):
        DataConfig(n_train=100_001).check_disjoint()


@pytest.mark.parametrize(
    "bad",
    [dict(epochs=0), dict(radius=0.0), dict(delta=-1.0), dict(head="mlp"), dict(loss_weighting="x"), dict(k=0)],
)
def test_invalid_pretrain_config(bad):
    with pytest.raises(ValueError):
        PretrainConfig(**bad)


def test_report_write_excludes_wall_clock(tmp_path):
    rep = MetricsReport({"loss": [0.5, 0.25]}, {"acc": float("nan")}, {"a": 1}, 0, 12.5)
    csv_path, json_path = rep.write(tmp_path, "m")
    assert csv_path.read_text().splitlines() == ["epoch,loss", "0,0.5", "1,0.25"]
    payload = json.loads(json_path.read_text())
    assert payload["metrics"]["acc"] is None
    assert "12.5" not in json_path.read_text()


def test_file_scenes_match_synthetic(small_stream, tmp_path):
    for i in range(2):
        formats.write_scan(tmp_path / "scans" / f"{i:06d}.bin", small_stream.scan(i))
        formats.write_queries(tmp_path / "q" / f"{i:06d}.q", small_stream.queries(i, 0.1, "uniform"))
    files = FileScenes(tmp_path / "scans", tmp_path / "q", seed=3)
    regen = FileScenes(tmp_path / "scans", None, seed=3)
    assert files.indices() == [0, 1]
    for i in range(2):
        a, b = small_stream.scan(i), files.scan(i)
        assert np.array_equal(a.points, b.points) and np.array_equal(a.intensities, b.intensities)
        q0, q1, q2 = small_stream.queries(i, 0.1, "uniform"), files.queries(i, 0.1, "uniform"), regen.queries(i, 0.1, "uniform")
        assert np.array_equal(q0.positions, q1.positions) and np.array_equal(q0.positions, q2.positions)
    with pytest.raises(ValueError, match="generated with"):
        files.queries(0, 0.2, "uniform")
    with pytest.raises(FileNotFoundError):
        files.scan(9)
