"""Differentiable point-cloud layers built on :mod:`sphnet.autodiff`.

Tensors flowing through layers are batched: features ``(B, N, C)``,
coordinates ``(B, N, 3)``.  Geometry (patches, kernel values, extension
weights) is plain numpy and never differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .cloud import knn_patches
from .sphmath import KernelBasis, eval_kernel


def extension_weights(points, sigma: float) -> np.ndarray:
    """Dirac extension weights ``1 / sum_j exp(-|x_j - x_i|^2 / (2 sigma^2))``.

    ``points`` is ``(..., N, 3)``; the sum runs over the whole cloud.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    points = np.asarray(points)
    sq = (points**2).sum(axis=-1)
    d2 = points @ np.swapaxes(points, -1, -2)
    d2 *= -2.0
    d2 += sq[..., :, None]
    d2 += sq[..., None, :]
    np.maximum(d2, 0.0, out=d2)
    d2 *= -1.0 / (2.0 * sigma * sigma)
    return 1.0 / np.exp(d2, out=d2).sum(axis=-1)


@dataclass
class ConvGeometry:
    """Everything a convolution needs about one (batched) cloud at one resolution.

    ``kernel[b, q, p]`` holds ``omega[i] * kappa(x_i - x_q)`` flattened over
    ``(r, l, m)``, where ``i = patches[b, q, p]``.
    """

    points: np.ndarray
    patches: np.ndarray
    weights: np.ndarray
    kernel: np.ndarray
    basis: KernelBasis

    @property
    def batch(self) -> int:
        return self.points.shape[0]

    @property
    def n_points(self) -> int:
        return self.points.shape[1]


def conv_geometry(points, basis: KernelBasis, k: int, patches=None, dtype=np.float64) -> ConvGeometry:
    """Patches, extension weights and weighted kernel values for ``(B, N, 3)`` clouds.

    ``k`` is clamped to the cloud size.  Pass ``patches`` to reuse a fixed
    neighbourhood structure (e.g. the one computed before a rotation).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 2:
        points = points[None]
    batch, n, _ = points.shape
    k = min(k, n)
    if patches is None:
        patches = knn_patches(points, k)
    patches = np.asarray(patches)
    if patches.ndim == 2:
        patches = patches[None]
    weights = extension_weights(points, basis.sigma)
    rows = np.arange(batch)[:, None, None]
    disp = points[rows, patches] - points[:, :, None, :]
    kern = eval_kernel(basis, disp, scale=weights[rows, patches], dtype=dtype)
    kern = kern.reshape(batch, n, patches.shape[-1], basis.size)
    return ConvGeometry(points.astype(dtype), patches, weights.astype(dtype), kern, basis)


def sph_conv_raw(geom: ConvGeometry, f) -> ad.Tensor:
    """Extended signal convolved with every basis function at every point.

    ``f`` is ``(B, N, J)``; returns ``(B, N, J, n_radial, n_degrees**2)``.
    """
    f = ad.as_tensor(f)
    if f.shape[:2] != geom.points.shape[:2]:
        raise ValueError(f"features {f.shape} do not match cloud {geom.points.shape}")
    batch, n, j = f.shape
    neigh = ad.gather(f, geom.patches)  # (B, N, k, J)
    raw = ad.matmul(ad.transpose(neigh, (0, 1, 3, 2)), ad.Tensor(geom.kernel))
    return ad.reshape(raw, (batch, n, j, geom.basis.n_radial, geom.basis.n_angular))


def invariant_reduce(raw: ad.Tensor, n_degrees: int, eps=None) -> ad.Tensor:
    """L2 norm over the order index of every degree: ``(..., n_degrees**2) -> (..., n_degrees)``."""
    return ad.segment_l2norm(raw, [2 * l + 1 for l in range(n_degrees)], eps)


def _he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Layer:
    """Holds named parameters (learned) and buffers (running statistics)."""

    def __init__(self):
        self.params: dict[str, ad.Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}


class SphConv(Layer):
    """Rotation-invariant convolution: raw responses, per-degree norms, then a linear map.

    ``W`` has shape ``(out, in, n_radial, n_degrees)``.
    """

    invariant = True

    def __init__(self, in_channels: int, out_channels: int, basis: KernelBasis, k: int, rng=None, dtype=np.float64):
        super().__init__()
        rng = np.random.default_rng(rng)
        self.basis, self.k = basis, k
        self.in_channels, self.out_channels = in_channels, out_channels
        shape = (out_channels, in_channels, basis.n_radial, self.n_features_per_channel)
        fan_in = int(np.prod(shape[1:]))
        self.params["W"] = ad.parameter(_he_normal(rng, shape, fan_in, dtype))
        self.params["b"] = ad.parameter(np.zeros(out_channels, dtype=dtype))

    @property
    def n_features_per_channel(self) -> int:
        return self.basis.n_degrees

    def features(self, geom: ConvGeometry, f) -> ad.Tensor:
        return invariant_reduce(sph_conv_raw(geom, f), self.basis.n_degrees)

    def __call__(self, geom: ConvGeometry, f) -> ad.Tensor:
        feats = self.features(geom, f)
        batch, n = feats.shape[:2]
        flat = ad.reshape(feats, (batch * n, -1))
        w = self.params["W"]
        out = ad.matmul(flat, ad.transpose(ad.reshape(w, (w.shape[0], -1)))) + self.params["b"]
        return ad.reshape(out, (batch, n, self.out_channels))


class SphBaseConv(SphConv):
    """Non-invariant ablation: weights contract the raw ``(r, l, m)`` responses directly."""

    invariant = False

    @property
    def n_features_per_channel(self) -> int:
        return self.basis.n_angular

    def features(self, geom: ConvGeometry, f) -> ad.Tensor:
        return sph_conv_raw(geom, f)


def make_conv(variant: str, *args, **kwargs) -> SphConv:
    if variant == "sphnet":
        return SphConv(*args, **kwargs)
    if variant == "sphbase":
        return SphBaseConv(*args, **kwargs)
    raise ValueError(f"unknown variant {variant!r}")


class BatchNorm(Layer):
    """Per-channel normalisation over batch and points; running stats with momentum 0.9."""

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5, dtype=np.float64):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.params["gamma"] = ad.parameter(np.ones(channels, dtype=dtype))
        self.params["beta"] = ad.parameter(np.zeros(channels, dtype=dtype))
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def __call__(self, x: ad.Tensor, train: bool) -> ad.Tensor:
        gamma, beta = self.params["gamma"], self.params["beta"]
        if not train:
            return ad.batchnorm_inference(
                x, gamma, beta, self.buffers["running_mean"], self.buffers["running_var"], self.eps
            )
        out, mu, var = ad.batchnorm(x, gamma, beta, self.eps)
        m = self.momentum
        self.buffers["running_mean"] = (m * self.buffers["running_mean"] + (1 - m) * mu).astype(mu.dtype)
        self.buffers["running_var"] = (m * self.buffers["running_var"] + (1 - m) * var).astype(var.dtype)
        return out


class Dense(Layer):
    def __init__(self, in_features: int, out_features: int, rng=None, dtype=np.float64):
        super().__init__()
        rng = np.random.default_rng(rng)
        self.params["W"] = ad.parameter(_he_normal(rng, (in_features, out_features), in_features, dtype))
        self.params["b"] = ad.parameter(np.zeros(out_features, dtype=dtype))

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return ad.matmul(x, self.params["W"]) + self.params["b"]


def dropout(x: ad.Tensor, rate: float, train: bool, rng) -> ad.Tensor:
    if not train or rate == 0:
        return x
    mask = rng.random(x.shape) >= rate
    return ad.dropout(x, mask, rate)


def kd_pool(x: ad.Tensor, levels: int) -> ad.Tensor:
    """Max over consecutive blocks of ``2**levels`` points (features must be in kd leaf order)."""
    if levels == 0:
        return x
    batch, n, c = x.shape
    group = 2**levels
    if n % group:
        raise ValueError(f"{n} points cannot be pooled by {group}")
    return ad.max_(ad.reshape(x, (batch, n // group, group, c)), axis=2)


def kd_pool_positions(points: np.ndarray, levels: int) -> np.ndarray:
    batch, n, _ = points.shape
    return points.reshape(batch, n // 2**levels, 2**levels, 3).mean(axis=2)


def kd_upsample(x: ad.Tensor, levels: int) -> ad.Tensor:
    return ad.repeat(x, 2**levels, axis=1) if levels else x


def global_max_pool(x: ad.Tensor) -> ad.Tensor:
    return ad.max_(x, axis=1)
