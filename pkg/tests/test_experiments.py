import json

import numpy as np
import pytest

from sphnet import experiments as ex
from sphnet.data import make_shapes_dataset
from sphnet.models import build_model


def tiny_classification(**changes):
    base = dict(
        model=ex.desk_classifier(n_classes=2).to_dict(),
        data={"classes": ("sphere", "box"), "train_size": 20, "test_size": 10, "n_points": 256},
        epochs=3,
    )
    base.update(changes)
    data = base.pop("data")
    return ex.ExperimentConfig(model=base.pop("model")).replace(data=data, **base)


@pytest.fixture(scope="module")
def smoke():
    cfg = tiny_classification()
    train_set, val_set = cfg.data.load("train"), cfg.data.load("test")
    return cfg, train_set, val_set, ex.train(cfg, train_set, val_set)


# --------------------------------------------------------------------------- configuration


def test_desk_defaults():
    cfg = ex.classification_experiment()
    assert (cfg.lr, cfg.batch_size, cfg.epochs, cfg.protocol) == (1e-3, 16, 60, "O/O")
    assert (cfg.data.train_size, cfg.data.test_size) == (200, 100)
    seg = ex.segmentation_experiment()
    assert seg.task == "segment" and seg.data.kind == "dumbbell"


def test_variants_differ_only_in_flag():
    a = ex.classification_experiment(variant="sphnet").to_dict()
    b = ex.classification_experiment(variant="sphbase").to_dict()
    assert a["model"].pop("variant") == "sphnet" and b["model"].pop("variant") == "sphbase"
    assert a == b


def test_config_json_round_trip_and_hash():
    cfg = tiny_classification(protocol="A/O")
    again = ex.ExperimentConfig.from_json(cfg.to_json())
    assert again == cfg and again.config_hash() == cfg.config_hash()
    assert cfg.replace(output_dir="/elsewhere").config_hash() == cfg.config_hash()
    assert cfg.replace(seed=2).config_hash() != cfg.config_hash()
    assert cfg.replace(rho=0.1).config_hash() != cfg.config_hash()
    assert len(cfg.config_hash()) == 16


def test_config_validation():
    with pytest.raises(ValueError):
        ex.ExperimentConfig(task="regress")
    with pytest.raises(ValueError):
        ex.ExperimentConfig(protocol="O/X")
    with pytest.raises(ValueError):
        ex.ExperimentConfig(task="segment")  # classifier model under a segmentation task
    with pytest.raises(ValueError):
        ex.ExperimentConfig.from_dict({"learning_rate": 0.1})
    with pytest.raises(ValueError):
        ex.ExperimentConfig.from_dict({"schema": "other"})
    with pytest.raises(ValueError):
        ex.classification_experiment(epochs=-1)


def test_data_spec_requires_root():
    with pytest.raises(ValueError):
        ex.DataSpec(kind="off").load("train")
    with pytest.raises(FileNotFoundError):
        ex.DataSpec(kind="files", root="/nonexistent/sphnet").load("train")


def test_files_data_kind(tmp_path):
    from sphnet.data import write_dataset

    ds = make_shapes_dataset(2, n_points=64, seed=4, split="train")
    write_dataset(ds, tmp_path)
    loaded = ex.DataSpec(kind="files", root=str(tmp_path)).load("train")
    assert loaded.points.tobytes() == ds.points.tobytes()


# --------------------------------------------------------------------------- training


def test_smoke_loss_strictly_decreases(smoke):
    # frozen for the default seed; the epoch mean over three noisy steps is not monotone for every seed
    _, _, _, result = smoke
    losses = [h["loss"] for h in result.history]
    assert len(losses) == 3
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_history_schema(smoke):
    _, _, _, result = smoke
    for i, h in enumerate(result.history, 1):
        assert set(h) == {"epoch", "loss", "train_acc", "val_acc", "seconds"}
        assert h["epoch"] == i and 0 <= h["train_acc"] <= 100 and h["seconds"] > 0
    assert result.final_validation == result.history[-1]["val_acc"]


def test_training_is_deterministic(smoke):
    cfg, train_set, val_set, result = smoke
    again = ex.train(cfg, train_set, val_set)
    strip = lambda hist: [{k: v for k, v in h.items() if k != "seconds"} for h in hist]
    assert strip(again.history) == strip(result.history)
    for k, v in result.model.parameters().items():
        np.testing.assert_array_equal(again.model.parameters()[k].data, v.data)


def test_original_pose_eval_matches_final_validation(smoke):
    cfg, _, val_set, result = smoke
    assert abs(ex.evaluate(result.model, val_set, "O", cfg.seed) - result.final_validation) < 1e-6


def test_evaluate_protocols_reports_both_poses(smoke):
    cfg, _, val_set, result = smoke
    cells = ex.evaluate_protocols(result.model, val_set, cfg.seed)
    assert set(cells) == {"O", "A"}
    assert cells == ex.evaluate_protocols(result.model, val_set, cfg.seed)


def test_save_and_load_run(smoke, tmp_path):
    cfg, _, val_set, result = smoke
    report = ex.save_run(result, tmp_path, {"O/O": result.final_validation})
    assert report["config_hash"] == cfg.config_hash()
    on_disk = json.loads((tmp_path / "report.json").read_text())
    assert on_disk["schema"] == "sphnet.run_report" and on_disk["metrics"]["O/O"] == result.final_validation
    assert len(on_disk["epochs"]) == 3 and "numpy" in on_disk["environment"]
    model, exp = ex.load_run(tmp_path / "model.ckpt")
    assert exp == cfg
    assert ex.evaluate(model, val_set, "A", cfg.seed) == ex.evaluate(result.model, val_set, "A", cfg.seed)
    rows = ex.read_csv((tmp_path / "history.csv").read_text())
    for row, h in zip(rows, result.history):
        assert row == pytest.approx(h)


def test_segmentation_training_runs():
    cfg = ex.segmentation_experiment(
        model=ex.desk_segmenter(n_points=64, channels=(8, 16, 16), pool_ratios=(4, 4, 4)).to_dict(),
        data={"train_size": 4, "test_size": 2, "n_points": 128},
        epochs=2,
        batch_size=2,
    )
    result = ex.train(cfg, val_set=cfg.data.load("test"))
    assert len(result.history) == 2
    pred, lab = ex.predict(result.model, cfg.data.load("test"), "A", 0)
    assert pred.shape == lab.shape == (2, 64)


def test_prefetch_forwards_errors():
    def broken():
        yield 1
        raise RuntimeError("boom")

    it = ex._prefetch(broken())
    assert next(it) == 1
    with pytest.raises(RuntimeError, match="boom"):
        next(it)


# --------------------------------------------------------------------------- reports


def test_csv_round_trip():
    rows = [{"n": 512, "kd_seconds": 0.00123, "fps_seconds": 1e-5}, {"n": 1024, "kd_seconds": 2.5, "fps_seconds": None}]
    text = ex.write_csv(rows, ex.BENCH_COLUMNS)
    assert text.splitlines()[0] == "n,kd_seconds,fps_seconds"
    assert ex.read_csv(text) == rows


def test_write_json_atomic(tmp_path):
    path = tmp_path / "sub" / "r.json"
    ex.write_json_atomic(path, {"a": 1})
    ex.write_json_atomic(path, {"a": 2})
    assert json.loads(path.read_text()) == {"a": 2}
    assert not list(path.parent.glob("*.tmp"))


def test_fit_slope_exact():
    n = np.array([1, 2, 4, 8, 16])
    assert ex.fit_slope(n, 3.0 * n**1.5) == pytest.approx(1.5)


def test_bench_pool_small_sizes():
    rows, summary = ex.bench_pool(sizes=(512, 2048, 8192), repeats=3)
    assert [r["n"] for r in rows] == [512, 2048, 8192]
    for col in ("kd_seconds", "fps_seconds"):
        times = [r[col] for r in rows]
        assert all(b > a for a, b in zip(times, times[1:])), times
    assert set(summary) == {"kd_slope", "fps_slope", "speedup_at_max"}
    assert ex.read_csv(ex.write_csv(rows, ex.BENCH_COLUMNS)) == rows
    with pytest.raises(ValueError):
        ex.bench_pool(sizes=(500,))


def test_sweep_schema_and_reproducibility():
    cfg = tiny_classification(data={"classes": ("sphere", "box"), "train_size": 3, "test_size": 2}, epochs=1)
    rows = ex.sweep_rho(cfg, values=(0.1, 0.2))
    assert [r["rho"] for r in rows] == [0.1, 0.2]
    for row in rows:
        assert list(row) == ex.SWEEP_COLUMNS
        assert all(0 <= row[c] <= 100 for c in ex.SWEEP_COLUMNS[1:])
    assert ex.sweep_rho(cfg, values=(0.1, 0.2)) == rows
    assert ex.read_csv(ex.write_csv(rows, ex.SWEEP_COLUMNS)) == rows


# --------------------------------------------------------------------------- invariance audit


@pytest.mark.parametrize("precision", ["float32", "float64"])
def test_audit_sphnet(precision):
    model = build_model(ex.desk_classifier(precision=precision, seed=3))
    report = ex.invariance_audit(model, trials=3, seed=1)
    assert report["max_layer_deviation"] < (1e-4 if precision == "float32" else 1e-9)
    assert report["wigner_residual"] < 1e-9
    assert 0.0 <= report["agreement"] <= 1.0
    assert set(report["layer_deviation"]) and report["variant"] == "sphnet"


def test_audit_sphbase_negative_control():
    model = build_model(ex.desk_classifier(variant="sphbase", seed=3))
    report = ex.invariance_audit(model, trials=3, seed=1)
    assert report["max_layer_deviation"] > 1e-2
    assert report["wigner_residual"] < 1e-9  # the raw responses are equivariant for both variants


def test_prediction_agreement_range():
    model = build_model(ex.desk_classifier(precision="float64"))
    pts = make_shapes_dataset(1, n_points=128, seed=0).points[0]
    assert 0.0 <= ex.prediction_agreement(model, pts, n_rotations=10) <= 1.0


@pytest.mark.slow
def test_extreme_rho_underperforms_default():
    # a kernel ten times wider than the tuned scale blurs every patch into one shell
    cfg = ex.classification_experiment(epochs=20, data={"train_size": 100, "test_size": 40})
    default = ex.train(cfg, val_set=cfg.data.load("test")).final_validation
    wide = ex.train(cfg.replace(rho=10 * cfg.model["rho"]), val_set=cfg.data.load("test")).final_validation
    print(f"rho={cfg.model['rho']}: {default:.1f}%  rho={10 * cfg.model['rho']}: {wide:.1f}%")
    assert wide < default
