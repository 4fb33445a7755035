"""Training, protocol evaluation, invariance audits, the pooling benchmark and the rho sweep.

Everything here is reproducible from an :class:`ExperimentConfig` and its seeds.
Accuracies are reported in percent.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import os
import platform
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .cloud import (
    build_kdtree,
    fps_voronoi_pool,
    knn_patches,
    pool,
    random_rotations,
)
from .data import (
    ALL_PROTOCOLS,
    SHAPE_CLASSES,
    Dataset,
    Protocol,
    load_off_directory,
    make_dumbbell_segmentation_dataset,
    make_shapes_dataset,
    protocol_sample,
    read_dataset,
)
from .layers import conv_geometry, kd_pool_positions, sph_conv_raw
from .models import (
    ClassifierConfig,
    SegmenterConfig,
    _levels,
    build_model,
    config_from_dict,
    load_model,
    save_model,
)
from .optim import Adam
from .sphmath import wigner_blockdiag

REPORT_VERSION = 1


# --------------------------------------------------------------------------- configuration


@dataclass(frozen=True)
class DataSpec:
    """Where samples come from.

    ``kind`` is ``shapes``, ``dumbbell``, ``off`` (ModelNet-style tree at
    ``root``) or ``files`` (a directory written by :func:`sphnet.data.write_dataset`).
    ``train_size`` / ``test_size`` count samples per class for ``shapes`` and
    per split for ``dumbbell``.  ``n_points`` is the stored cloud size; models
    subsample it.  ``classes`` restricts the shapes task to a subset.
    """

    kind: str = "shapes"
    train_size: int = 200
    test_size: int = 100
    n_points: int = 256
    jitter: float = 0.01
    seed: int = 0
    root: str | None = None
    classes: tuple | None = None

    def __post_init__(self):
        if self.classes is not None:
            object.__setattr__(self, "classes", tuple(self.classes))

    def load(self, split: str) -> Dataset:
        size = self.train_size if split == "train" else self.test_size
        if self.kind == "shapes":
            classes = SHAPE_CLASSES if self.classes is None else self.classes
            return make_shapes_dataset(size, self.n_points, self.jitter, self.seed, split, classes)
        if self.kind == "dumbbell":
            return make_dumbbell_segmentation_dataset(size, self.n_points, self.seed, split, self.jitter)
        if self.root is None:
            raise ValueError(f"data kind {self.kind!r} needs a root directory")
        if not Path(self.root).exists():
            raise FileNotFoundError(f"dataset root {self.root} does not exist")
        if self.kind == "off":
            return load_off_directory(self.root, split, self.n_points, self.seed)
        if self.kind == "files":
            return read_dataset(self.root, split)
        raise ValueError(f"unknown data kind {self.kind!r}")


def desk_classifier(**overrides) -> ClassifierConfig:
    """Classifier sized for the synthetic shapes task on a single CPU core."""
    base = dict(
        n_classes=5,
        n_points=128,
        channels=(32, 64, 128),
        pool_ratios=(4, 4),
        fc=(64, 32),
        dropout=0.5,
        k=16,
        rho=0.2,
        rho_scales=(1.0, 2.0, 4.0),
    )
    base.update(overrides)
    return ClassifierConfig(**base)


def desk_segmenter(**overrides) -> SegmenterConfig:
    """Segmenter sized for the dumbbell task on a single CPU core."""
    base = dict(
        n_labels=3,
        n_points=256,
        channels=(16, 32, 64),
        pool_ratios=(4, 4, 4),
        k=16,
        rho=0.15,
        rho_scales=(1.0, 2.0, 4.0),
    )
    base.update(overrides)
    return SegmenterConfig(**base)


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "classify"
    model: dict = field(default_factory=lambda: desk_classifier().to_dict())
    data: DataSpec = field(default_factory=DataSpec)
    protocol: str = "O/O"
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 60
    seed: int = 0
    validate_every: int = 1
    output_dir: str | None = None

    def __post_init__(self):
        if self.task not in ("classify", "segment"):
            raise ValueError(f"task must be 'classify' or 'segment', got {self.task!r}")
        Protocol.parse(self.protocol)
        cfg = self.model_config()
        expected = ClassifierConfig if self.task == "classify" else SegmenterConfig
        if not isinstance(cfg, expected):
            raise ValueError(f"task {self.task!r} needs a {expected.kind} model")
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("epochs, batch_size and lr must be positive")

    def model_config(self):
        return config_from_dict(self.model)

    @property
    def variant(self) -> str:
        return self.model["variant"]

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with changes; ``variant``, ``precision`` and ``rho`` edit the model config.

        ``model`` may be a model config or its dict and replaces the model wholesale.
        """
        model = changes.pop("model", self.model)
        model = dict(model if isinstance(model, dict) else model.to_dict())
        for key in ("variant", "precision", "rho"):
            if key in changes:
                model[key] = changes.pop(key)
        if isinstance(changes.get("data"), dict):
            changes["data"] = dataclasses.replace(self.data, **changes["data"])
        return dataclasses.replace(self, model=model, **changes)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["schema"] = "sphnet.experiment"
        out["version"] = REPORT_VERSION
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if d.pop("schema", "sphnet.experiment") != "sphnet.experiment":
            raise ValueError("not an experiment config")
        if d.pop("version", REPORT_VERSION) != REPORT_VERSION:
            raise ValueError("unsupported experiment config version")
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown experiment keys: {sorted(unknown)}")
        if "data" in d:
            d["data"] = DataSpec(**d["data"])
        if "model" in d:
            d["model"] = config_from_dict(d["model"]).to_dict()
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    def config_hash(self) -> str:
        """Hash of everything that affects results (output paths excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def classification_experiment(**changes) -> ExperimentConfig:
    return ExperimentConfig().replace(**changes)


def segmentation_experiment(**changes) -> ExperimentConfig:
    base = ExperimentConfig(
        task="segment",
        model=desk_segmenter().to_dict(),
        data=DataSpec(kind="dumbbell", train_size=240, test_size=100, n_points=512, jitter=0.0),
        epochs=30,
        batch_size=8,
    )
    return base.replace(**changes)


# --------------------------------------------------------------------------- batching


def _prefetch(iterable, depth: int = 2):
    """Run ``iterable`` on a worker thread, ``depth`` items ahead of the consumer."""
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()

    def work():
        try:
            for item in iterable:
                q.put(item)
        except BaseException as exc:  # forwarded to the consumer
            q.put(exc)
        q.put(done)

    threading.Thread(target=work, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        if isinstance(item, BaseException):
            raise item
        yield item


def iterate_batches(dataset, indices, augment, seed, role, epoch, n_points, batch_size):
    for start in range(0, len(indices), batch_size):
        chunk = indices[start : start + batch_size]
        samples = [protocol_sample(dataset, int(i), augment, seed, role, epoch, n_points) for i in chunk]
        yield np.stack([s[0] for s in samples]), np.stack([s[1] for s in samples])


def batch_loss(model, points, labels, train, rng):
    logits = model(points, train=train, rng=rng)
    return ad.softmax_cross_entropy(logits, labels), logits


# --------------------------------------------------------------------------- training / evaluation


@dataclass
class TrainResult:
    model: object
    config: ExperimentConfig
    history: list
    optimizer: Adam
    seconds: float

    @property
    def final_validation(self):
        vals = [h["val_acc"] for h in self.history if h.get("val_acc") is not None]
        return vals[-1] if vals else None


def predict(model, dataset: Dataset, augment: str, seed: int, batch_size: int = 32):
    """Eval-mode predictions (class or per-point labels) under fixed test rotations."""
    n_points = model.config.n_points
    preds, labels = [], []
    order = np.arange(len(dataset))
    for pts, lab in iterate_batches(dataset, order, augment, seed, "test", 0, n_points, batch_size):
        logits = model(pts, train=False).data
        preds.append(logits.argmax(axis=-1))
        labels.append(lab)
    return np.concatenate(preds), np.concatenate(labels)


def evaluate(model, dataset: Dataset, augment: str, seed: int = 0, batch_size: int = 32) -> float:
    """Accuracy in percent (per sample, or per point for segmentation)."""
    pred, lab = predict(model, dataset, augment, seed, batch_size)
    return float(100.0 * np.mean(pred == lab))


def train(config: ExperimentConfig, train_set=None, val_set=None, log=None) -> TrainResult:
    """Cross-entropy + Adam under the training half of ``config.protocol``.

    Validation (every ``validate_every`` epochs and after the last one) uses
    the test half of the protocol on ``val_set``.
    """
    protocol = Protocol.parse(config.protocol)
    train_set = config.data.load("train") if train_set is None else train_set
    model = build_model(config.model_config())
    optimizer = Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng([config.seed, 1])
    n_points = model.config.n_points
    history = []
    start = time.perf_counter()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_set))
        total, correct, seen = 0.0, 0, 0
        batches = iterate_batches(
            train_set, order, protocol.train_aug, config.seed, "train", epoch, n_points, config.batch_size
        )
        for pts, lab in _prefetch(batches):
            optimizer.zero_grad()
            loss, logits = batch_loss(model, pts, lab, True, rng)
            loss.backward()
            optimizer.step()
            total += float(loss.data) * len(pts)
            correct += int((logits.data.argmax(-1) == lab).sum())
            seen += lab.size
        entry = {
            "epoch": epoch + 1,
            "loss": total / len(train_set),
            "train_acc": 100.0 * correct / seen,
            "val_acc": None,
        }
        last = epoch + 1 == config.epochs
        if val_set is not None and (last or (epoch + 1) % config.validate_every == 0):
            entry["val_acc"] = evaluate(model, val_set, protocol.test_aug, config.seed)
        entry["seconds"] = time.perf_counter() - t0
        history.append(entry)
        if log:
            log(entry)
    return TrainResult(model, config, history, optimizer, time.perf_counter() - start)


def evaluate_protocols(model, test_set: Dataset, seed: int = 0, augments=("O", "A")) -> dict:
    return {aug: evaluate(model, test_set, aug, seed) for aug in augments}


def protocol_grid(config: ExperimentConfig, train_augs=("O", "A"), train_set=None, test_set=None, log=None) -> dict:
    """Train once per training augmentation and test each model on O and A.

    Returns ``{"cells": {"O/O": acc, "O/A": acc, ...}, "runs": {train_aug: TrainResult}}``.
    """
    train_set = config.data.load("train") if train_set is None else train_set
    test_set = config.data.load("test") if test_set is None else test_set
    cells, runs = {}, {}
    for tr in train_augs:
        result = train(config.replace(protocol=f"{tr}/O"), train_set, test_set, log)
        runs[tr] = result
        for te, acc in evaluate_protocols(result.model, test_set, config.seed).items():
            cells[f"{tr}/{te}"] = acc
    return {"cells": cells, "runs": runs}


# --------------------------------------------------------------------------- reports


def environment_info() -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "platform": platform.platform(),
        "cpus": os.cpu_count(),
    }


def run_report(result: TrainResult, metrics: dict | None = None) -> dict:
    return {
        "schema": "sphnet.run_report",
        "version": REPORT_VERSION,
        "config": result.config.to_dict(),
        "config_hash": result.config.config_hash(),
        "epochs": result.history,
        "metrics": metrics or {},
        "seconds": result.seconds,
        "environment": environment_info(),
    }


def write_json_atomic(path, payload: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True))
    os.replace(tmp, path)


def write_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: row.get(c) for c in columns})
    return buf.getvalue()


def read_csv(text: str) -> list[dict]:
    """Rows of a report CSV with numeric cells converted back to int/float."""

    def convert(v):
        if v == "":
            return None
        for cast in (int, float):
            try:
                return cast(v)
            except ValueError:
                pass
        return v

    return [{k: convert(v) for k, v in row.items()} for row in csv.DictReader(io.StringIO(text))]


def save_run(result: TrainResult, directory, metrics: dict | None = None) -> dict:
    """Checkpoint, JSON run report and per-epoch CSV under ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    opt = result.optimizer.state
    optim_state = {f"m.{k}": v for k, v in opt.m.items()} | {f"v.{k}": v for k, v in opt.v.items()}
    optim_state["step"] = np.array([opt.step], dtype=np.int64)
    extra = {"experiment": result.config.to_dict(), "config_hash": result.config.config_hash()}
    save_model(directory / "model.ckpt", result.model, optim_state, extra)
    report = run_report(result, metrics)
    write_json_atomic(directory / "report.json", report)
    cols = ["epoch", "loss", "train_acc", "val_acc", "seconds"]
    (directory / "history.csv").write_text(write_csv(result.history, cols))
    return report


def load_run(path):
    """``(model, experiment config)`` from a checkpoint written by :func:`save_run`."""
    model, _, meta = load_model(path)
    exp = ExperimentConfig.from_dict(meta["experiment"]) if "experiment" in meta else None
    return model, exp


# --------------------------------------------------------------------------- invariance audit


def patch_plan(model, points: np.ndarray, perms: np.ndarray) -> list[np.ndarray]:
    """kNN patches the model would build at each convolution resolution."""
    c = model.config
    rows = np.arange(len(points))[:, None]
    pts = points[rows, perms]
    plans = []
    for i in range(len(c.channels)):
        plans.append(knn_patches(pts, min(c.k, pts.shape[1])))
        if i < len(c.pool_ratios):
            pts = kd_pool_positions(pts, _levels(c.pool_ratios[i]))
    return plans


def _relative(a: np.ndarray, b: np.ndarray) -> float:
    scale = np.abs(a).max()
    return float(np.abs(a - b).max() / scale) if scale > 0 else float(np.abs(a - b).max())


def _audit_cloud(model, seed) -> np.ndarray:
    from .data import sample_shape

    rng = np.random.default_rng(seed)
    n = model.config.n_points
    return sample_shape("torus", n, rng, jitter=0.01)[None]


def invariance_audit(model, trials: int = 10, seed: int = 0, points=None) -> dict:
    """Rotation audit of a (trained or random) model on one cloud.

    (a) per-layer max relative deviation with shared kd-trees and patches,
    (b) end-to-end prediction agreement with re-built trees,
    (c) Wigner-equivariance residual of the raw first-layer responses (double precision).
    """
    points = _audit_cloud(model, seed) if points is None else np.asarray(points, dtype=np.float64).reshape(1, -1, 3)
    rotations = random_rotations(trials, seed=[seed, 3])
    perms = model.leaf_order(points)
    plan = patch_plan(model, points, perms)

    def record_into(store):
        return lambda name, t: store.__setitem__(name, t.data.astype(np.float64))

    base = {}
    logits = model(points, perms=perms, patches=plan, record=record_into(base)).data
    base_pred = logits.argmax(-1)
    layer_dev = {name: 0.0 for name in base}
    agreement = []
    wigner_res = 0.0
    basis = model.basis(0)
    rows = np.arange(1)[:, None]
    pts0 = points[rows, perms]
    f0 = np.random.default_rng([seed, 4]).standard_normal((1, pts0.shape[1], 2))
    geom0 = conv_geometry(pts0, basis, model.config.k, plan[0], np.float64)
    raw0 = sph_conv_raw(geom0, f0).data
    for rot in rotations:
        rpts = points @ rot.T
        shared = {}
        model(rpts, perms=perms, patches=plan, record=record_into(shared))
        for name in base:
            layer_dev[name] = max(layer_dev[name], _relative(base[name], shared[name]))
        pred = model(rpts).data.argmax(-1)
        agreement.append(float(np.mean(pred == base_pred)))
        geom = conv_geometry(pts0 @ rot.T, basis, model.config.k, plan[0], np.float64)
        raw = sph_conv_raw(geom, f0).data
        expected = raw0 @ wigner_blockdiag(basis.n_degrees, rot).T
        wigner_res = max(wigner_res, _relative(expected, raw))
    return {
        "layer_deviation": layer_dev,
        "max_layer_deviation": max(layer_dev.values()),
        "agreement": float(np.mean(agreement)),
        "wigner_residual": wigner_res,
        "trials": trials,
        "variant": model.config.variant,
        "precision": model.config.precision,
    }


def prediction_agreement(model, points, n_rotations: int = 100, seed: int = 0) -> float:
    """Fraction of random rotations whose prediction matches the unrotated one (trees re-built)."""
    points = np.asarray(points, dtype=np.float64)[None]
    base = model(points).data.argmax(-1)
    rotations = random_rotations(n_rotations, seed=seed)
    batch = np.einsum("rij,nj->rni", rotations, points[0])
    preds = np.concatenate([model(batch[i : i + 25]).data.argmax(-1) for i in range(0, n_rotations, 25)])
    return float(np.mean(preds == base))


# --------------------------------------------------------------------------- pooling benchmark


def _median_time(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def fit_slope(sizes, seconds) -> float:
    """Least-squares slope of log(seconds) against log(size)."""
    return float(np.polyfit(np.log(sizes), np.log(seconds), 1)[0])


def bench_pool(sizes=tuple(2**p for p in range(9, 15)), ratio: int = 4, channels: int = 16, repeats: int = 5, seed: int = 0):
    """Median wall-clock of kd-tree pooling (tree build + pool) vs FPS + Voronoi pooling.

    Both reduce ``N`` points to ``N / ratio``.  Returns ``(rows, summary)``.
    """
    levels = _levels(ratio)
    rows = []
    for n in sizes:
        if n & (n - 1):
            raise ValueError(f"size {n} is not a power of two")
        rng = np.random.default_rng([seed, n])
        pts = rng.standard_normal((n, 3))
        feats = rng.standard_normal((n, channels))

        def kd():
            tree = build_kdtree(pts)
            return pool(tree, feats, pts, levels)

        def fps():
            return fps_voronoi_pool(pts, feats, n // ratio)

        rows.append({"n": int(n), "kd_seconds": _median_time(kd, repeats), "fps_seconds": _median_time(fps, repeats)})
    ns = [r["n"] for r in rows]
    summary = {
        "kd_slope": fit_slope(ns, [r["kd_seconds"] for r in rows]),
        "fps_slope": fit_slope(ns, [r["fps_seconds"] for r in rows]),
        "speedup_at_max": rows[-1]["fps_seconds"] / rows[-1]["kd_seconds"],
    }
    return rows, summary


BENCH_COLUMNS = ["n", "kd_seconds", "fps_seconds"]


# --------------------------------------------------------------------------- rho sweep

RHO_GRID = (0.05, 0.075, 0.1, 0.15, 0.2)


def sweep_rho(config: ExperimentConfig, values=RHO_GRID, train_augs=("O", "A"), log=None) -> list[dict]:
    """One row per rho with the protocol cells, mirroring a scale-parameter table."""
    train_set = config.data.load("train")
    test_set = config.data.load("test")
    rows = []
    for rho in values:
        grid = protocol_grid(config.replace(rho=float(rho)), train_augs, train_set, test_set, log)
        row = {"rho": float(rho)}
        row.update({str(p): grid["cells"].get(str(p)) for p in ALL_PROTOCOLS})
        rows.append(row)
    return rows


SWEEP_COLUMNS = ["rho"] + [str(p) for p in ALL_PROTOCOLS]
