"""Classification and U-shaped segmentation networks, SPHNet and SPHBase variants."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .cloud import build_kdtree
from .layers import (
    BatchNorm,
    ConvGeometry,
    Dense,
    conv_geometry,
    dropout,
    global_max_pool,
    kd_pool,
    kd_pool_positions,
    kd_upsample,
    make_conv,
)
from .sphmath import KernelBasis

CONFIG_VERSION = 1
_DTYPES = {"float32": np.float32, "float64": np.float64}


def _levels(ratio: int) -> int:
    levels = int(ratio).bit_length() - 1
    if ratio < 2 or 2**levels != ratio:
        raise ValueError(f"pool ratio {ratio} is not a power of two")
    return levels


class _Config:
    kind = ""

    def to_dict(self) -> dict:
        out = {"schema": self.kind, "version": CONFIG_VERSION}
        out.update({k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()})
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict):
        d = dict(d)
        schema = d.pop("schema", cls.kind)
        version = d.pop("version", CONFIG_VERSION)
        if schema != cls.kind:
            raise ValueError(f"expected a {cls.kind} config, got {schema!r}")
        if version != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {version}")
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    @classmethod
    def from_json(cls, text: str):
        return cls.from_dict(json.loads(text))

    @property
    def dtype(self):
        return _DTYPES[self.precision]


@dataclass(frozen=True)
class ClassifierConfig(_Config):
    kind = "sphnet.classifier"

    n_classes: int = 40
    n_points: int = 1024
    channels: tuple = (64, 256, 1024)
    pool_ratios: tuple = (4, 4)
    fc: tuple = (512, 256)
    dropout: float = 0.5
    k: int = 64
    rho: float = 0.1
    rho_scales: tuple = (1.0, 2.0, 4.0)
    n_radial: int = 2
    n_degrees: int = 4
    variant: str = "sphnet"
    precision: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if len(self.pool_ratios) != len(self.channels) - 1 or len(self.rho_scales) != len(self.channels):
            raise ValueError("need one pool ratio between consecutive blocks and one rho scale per block")
        depth = sum(_levels(r) for r in self.pool_ratios)
        if self.n_points < 2**depth or self.n_points & (self.n_points - 1):
            raise ValueError(f"n_points={self.n_points} incompatible with pool ratios {self.pool_ratios}")


@dataclass(frozen=True)
class SegmenterConfig(_Config):
    kind = "sphnet.segmenter"

    n_labels: int = 3
    n_points: int = 2048
    channels: tuple = (64, 128, 256)
    pool_ratios: tuple = (4, 4, 8)
    dropout: float = 0.5
    k: int = 48
    rho: float = 0.08
    rho_scales: tuple = (1.0, 2.0, 4.0)
    n_radial: int = 2
    n_degrees: int = 4
    variant: str = "sphnet"
    precision: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if not len(self.channels) == len(self.pool_ratios) == len(self.rho_scales):
            raise ValueError("channels, pool ratios and rho scales must have equal length")
        depth = sum(_levels(r) for r in self.pool_ratios)
        if self.n_points < 2**depth or self.n_points & (self.n_points - 1):
            raise ValueError(f"n_points={self.n_points} incompatible with pool ratios {self.pool_ratios}")


class _Network:
    """Shared plumbing: named layers, parameter/buffer access, checkpoints."""

    def __init__(self, config):
        self.config = config
        self.layers: dict = {}

    def parameters(self) -> dict[str, ad.Tensor]:
        return {f"{ln}.{pn}": t for ln, layer in self.layers.items() for pn, t in layer.params.items()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{ln}.{bn}": a for ln, layer in self.layers.items() for bn, a in layer.buffers.items()}

    def n_parameters(self) -> int:
        return int(sum(t.data.size for t in self.parameters().values()))

    def state(self) -> dict:
        return {
            "param": {k: t.data.copy() for k, t in self.parameters().items()},
            "buffer": {k: a.copy() for k, a in self.buffers().items()},
        }

    def load_state(self, tensors: dict):
        params, buffers = self.parameters(), self.buffers()
        got_p, got_b = tensors.get("param", {}), tensors.get("buffer", {})
        if set(got_p) != set(params) or set(got_b) != set(buffers):
            raise checkpoint.CheckpointError("checkpoint does not match the model layout")
        for k, t in params.items():
            if got_p[k].shape != t.shape:
                raise checkpoint.CheckpointError(f"shape mismatch for {k}: {got_p[k].shape} vs {t.shape}")
            t.data = np.array(got_p[k], dtype=t.dtype)
        for k in buffers:
            ln, bn = k.split(".", 1)
            self.layers[ln].buffers[bn] = np.array(got_b[k], dtype=self.config.dtype)

    def _check_input(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        if points.ndim == 2:
            points = points[None]
        if points.shape[1:] != (self.config.n_points, 3):
            raise ValueError(f"expected clouds of {self.config.n_points} points, got {points.shape}")
        if np.sqrt((points**2).sum(axis=-1)).max() > 1.0 + 1e-5:
            raise ValueError("input cloud is not normalized (a point lies outside the unit ball)")
        return points

    def basis(self, block: int) -> KernelBasis:
        c = self.config
        return KernelBasis(c.rho * c.rho_scales[block], c.n_radial, c.n_degrees)

    def leaf_order(self, points: np.ndarray, perms=None) -> np.ndarray:
        """kd-tree permutations for a batch; pass ``perms`` to reuse another cloud's tree."""
        if perms is None:
            perms = np.stack([build_kdtree(p).perm for p in points])
        return np.asarray(perms)


Recorder = Optional[Callable[[str, ad.Tensor], None]]


class Classifier(_Network):
    """conv -> pool -> conv -> pool -> conv -> global max -> FC blocks -> logits."""

    def __init__(self, config: ClassifierConfig):
        super().__init__(config)
        rng = np.random.default_rng(config.seed)
        dtype = config.dtype
        in_ch = 1
        for i, out_ch in enumerate(config.channels):
            self.layers[f"conv{i}"] = make_conv(config.variant, in_ch, out_ch, self.basis(i), config.k, rng=rng, dtype=dtype)
            self.layers[f"bn{i}"] = BatchNorm(out_ch, dtype=dtype)
            in_ch = out_ch
        for i, units in enumerate(config.fc):
            self.layers[f"fc{i}"] = Dense(in_ch, units, rng=rng, dtype=dtype)
            self.layers[f"fc_bn{i}"] = BatchNorm(units, dtype=dtype)
            in_ch = units
        self.layers["out"] = Dense(in_ch, config.n_classes, rng=rng, dtype=dtype)

    def forward(self, points, train: bool = False, rng=None, perms=None, patches=None, record: Recorder = None):
        """Logits ``(B, n_classes)`` for normalized clouds ``(B, N, 3)``.

        ``perms`` fixes the kd-tree leaf order (shared-tree mode);
        ``patches`` optionally fixes the kNN patches per block.
        """
        c = self.config
        points = self._check_input(points)
        perms = self.leaf_order(points, perms)
        rows = np.arange(len(points))[:, None]
        pts = points[rows, perms]
        f = ad.Tensor(np.ones(pts.shape[:2] + (1,), dtype=c.dtype))
        rng = rng if rng is not None else np.random.default_rng(0)
        last = len(c.channels) - 1
        for i in range(len(c.channels)):
            geom = conv_geometry(pts, self.basis(i), c.k, None if patches is None else patches[i], c.dtype)
            h = self.layers[f"conv{i}"](geom, f)
            h = ad.relu(self.layers[f"bn{i}"](h, train))
            if record:
                record(f"conv{i}", h)
            if i < last:
                levels = _levels(c.pool_ratios[i])
                f = kd_pool(h, levels)
                pts = kd_pool_positions(pts, levels)
            else:
                f = global_max_pool(h)
        for i in range(len(c.fc)):
            f = self.layers[f"fc{i}"](f)
            f = ad.relu(self.layers[f"fc_bn{i}"](f, train))
            f = dropout(f, c.dropout, train, rng)
            if record:
                record(f"fc{i}", f)
        return self.layers["out"](f)

    __call__ = forward


class Segmenter(_Network):
    """U-net: encoder conv/pool blocks, decoder upsample/concat/conv blocks, per-point logits."""

    def __init__(self, config: SegmenterConfig):
        super().__init__(config)
        rng = np.random.default_rng(config.seed)
        dtype = config.dtype
        make = lambda j, g, block: make_conv(config.variant, j, g, self.basis(block), config.k, rng=rng, dtype=dtype)
        in_ch = 1
        for i, out_ch in enumerate(config.channels):
            self.layers[f"enc{i}"] = make(in_ch, out_ch, i)
            self.layers[f"enc_bn{i}"] = BatchNorm(out_ch, dtype=dtype)
            in_ch = out_ch
        # decoder block i runs at encoder level i, from the coarsest level back up
        for i in reversed(range(len(config.channels))):
            out_ch = config.channels[i]
            self.layers[f"dec{i}"] = make(in_ch + out_ch, out_ch, i)
            self.layers[f"dec_bn{i}"] = BatchNorm(out_ch, dtype=dtype)
            in_ch = out_ch
        self.layers["out"] = make(in_ch, config.n_labels, 0)

    @staticmethod
    def decoder_input(coarse: ad.Tensor, skip: ad.Tensor, levels: int) -> ad.Tensor:
        """Upsample ``coarse`` by ``2**levels`` and append the skip features."""
        return ad.concat([kd_upsample(coarse, levels), skip], axis=-1)

    def forward(self, points, train: bool = False, rng=None, perms=None, patches=None, record: Recorder = None):
        """Per-point logits ``(B, N, n_labels)`` in the input point order."""
        c = self.config
        points = self._check_input(points)
        perms = self.leaf_order(points, perms)
        rows = np.arange(len(points))[:, None]
        pts = points[rows, perms]
        rng = rng if rng is not None else np.random.default_rng(0)
        f = ad.Tensor(np.ones(pts.shape[:2] + (1,), dtype=c.dtype))
        geoms: list[ConvGeometry] = []
        skips = []
        for i in range(len(c.channels)):
            geom = conv_geometry(pts, self.basis(i), c.k, None if patches is None else patches[i], c.dtype)
            geoms.append(geom)
            h = ad.relu(self.layers[f"enc_bn{i}"](self.layers[f"enc{i}"](geom, f), train))
            if record:
                record(f"enc{i}", h)
            skips.append(h)
            levels = _levels(c.pool_ratios[i])
            f = kd_pool(h, levels)
            pts = kd_pool_positions(pts, levels)
        n_dec = len(c.channels)
        for i in reversed(range(n_dec)):
            x = self.decoder_input(f, skips[i], _levels(c.pool_ratios[i]))
            f = ad.relu(self.layers[f"dec_bn{i}"](self.layers[f"dec{i}"](geoms[i], x), train))
            if i < 2:
                f = dropout(f, c.dropout, train, rng)
            if record:
                record(f"dec{i}", f)
        logits = self.layers["out"](geoms[0], f)
        inverse = np.argsort(perms, axis=1)
        return ad.gather(logits, inverse)

    __call__ = forward


def build_model(config):
    if isinstance(config, ClassifierConfig):
        return Classifier(config)
    if isinstance(config, SegmenterConfig):
        return Segmenter(config)
    raise TypeError(f"unsupported config type {type(config).__name__}")


def config_from_dict(d: dict):
    for cls in (ClassifierConfig, SegmenterConfig):
        if d.get("schema") == cls.kind:
            return cls.from_dict(d)
    raise ValueError(f"unknown model config schema {d.get('schema')!r}")


def count_params(config) -> int:
    """Exact number of learnable scalars of the network described by ``config``."""
    return build_model(config).n_parameters()


def param_table(config) -> dict[str, int]:
    return {k: int(t.data.size) for k, t in build_model(config).parameters().items()}


def save_model(path, model, optimizer_state: dict | None = None, extra: dict | None = None):
    tensors = model.state()
    if optimizer_state:
        tensors["optim"] = optimizer_state
    meta = {"model": model.config.to_dict()}
    if extra:
        meta.update(extra)
    checkpoint.save(path, tensors, meta)


def load_model(path):
    """Rebuild a model from a checkpoint; returns ``(model, tensors, meta)``."""
    tensors, meta = checkpoint.load(path)
    model = build_model(config_from_dict(meta["model"]))
    model.load_state(tensors)
    return model, tensors, meta
