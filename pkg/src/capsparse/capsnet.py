"""Capsule autoencoder: conv features, primary capsules, routing, decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

SQUASH_EPS = 1e-9


@dataclass(frozen=True)
class Geometry:
    canvas: int = 28
    conv_channels: int = 256
    conv_kernel: int = 9
    primary_kernel: int = 9
    primary_stride: int = 2
    n_primary: int = 32  # P
    primary_dim: int = 8  # D_p
    n_latent: int = 16  # L
    latent_dim: int = 16  # D_l
    decoder_widths: tuple[int, ...] = (512, 1024)
    routing_iterations: int = 3

    @property
    def grid(self) -> int:
        """Side of the primary capsule grid (Wc == Hc)."""
        after_conv = self.canvas - self.conv_kernel + 1
        if after_conv < self.primary_kernel:
            raise ValueError(f"canvas {self.canvas} too small for kernels {self.conv_kernel}/{self.primary_kernel}")
        return (after_conv - self.primary_kernel) // self.primary_stride + 1

    @property
    def n_inputs(self) -> int:
        return self.grid * self.grid * self.n_primary

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decoder_widths"] = list(self.decoder_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Geometry":
        d = dict(d)
        d["decoder_widths"] = tuple(d.get("decoder_widths", (512, 1024)))
        return cls(**d)


class CapsNetModel:
    """All learnable weights plus geometry.

    ``params`` is ordered and names are stable; checkpoints rely on both.
    """

    PARAM_NAMES = ("conv1_w", "conv1_b", "primary_w", "primary_b", "vote_w")

    def __init__(self, geometry: Geometry, seed: int = 0, dtype=None):
        self.geometry = g = geometry
        dtype = dtype or T.default_dtype()
        rng = np.random.default_rng(seed)
        self.rng = rng

        def he(shape, fan_in):
            return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)

        def glorot(shape, fan_in, fan_out):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-lim, lim, size=shape).astype(dtype)

        k1, k2 = g.conv_kernel, g.primary_kernel
        pd = g.n_primary * g.primary_dim
        self.tensors: dict[str, Tensor] = {}
        self._add("conv1_w", he((g.conv_channels, 1, k1, k1), k1 * k1))
        self._add("conv1_b", np.zeros(g.conv_channels, dtype))
        self._add("primary_w", glorot((pd, g.conv_channels, k2, k2), g.conv_channels * k2 * k2, pd * k2 * k2 / g.primary_stride ** 2))
        self._add("primary_b", np.zeros(pd, dtype))
        vote_std = 1.0 / np.sqrt(g.primary_dim)
        self._add("vote_w", rng.normal(0.0, vote_std, size=(g.grid, g.grid, g.n_primary, g.n_latent, g.primary_dim, g.latent_dim)).astype(dtype))
        widths = [g.n_latent * g.latent_dim, *g.decoder_widths, g.canvas * g.canvas]
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            self._add(f"dec{i}_w", glorot((a, b), a, b))
            self._add(f"dec{i}_b", np.zeros(b, dtype))

    def _add(self, name, arr):
        self.tensors[name] = Tensor(arr, requires_grad=True, name=name, dtype=arr.dtype)

    @property
    def params(self) -> list[Tensor]:
        return list(self.tensors.values())

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def n_decoder_layers(self) -> int:
        return len(self.geometry.decoder_widths) + 1


def squash(s: Tensor) -> Tensor:
    """v = |s|^2/(1+|s|^2) * s/|s| along the last axis; v = 0 at s = 0."""
    sq = T.reduce_sum(s * s, axis=-1, keepdims=True)
    norm = T.sqrt(sq + SQUASH_EPS)
    return s * (sq / ((sq + 1.0) * norm))


def primary_caps_forward(images: Tensor, model: CapsNetModel) -> Tensor:
    """images [K,1,canvas,canvas] -> poses [K,Wc,Hc,P,D_p]."""
    g = model.geometry
    images = T.as_tensor(images)
    if images.ndim != 4 or images.shape[1] != 1 or images.shape[2:] != (g.canvas, g.canvas):
        raise ValueError(f"expected images [K,1,{g.canvas},{g.canvas}], got {images.shape}")
    h = T.conv2d(images, model["conv1_w"], 1)
    h = T.relu(h + model["conv1_b"].reshape(1, -1, 1, 1))
    p = T.conv2d(h, model["primary_w"], g.primary_stride)
    p = p + model["primary_b"].reshape(1, -1, 1, 1)
    k = images.shape[0]
    p = p.reshape(k, g.n_primary, g.primary_dim, g.grid, g.grid).transpose(0, 3, 4, 1, 2)
    return squash(p)


def votes(u: Tensor, model: CapsNetModel) -> Tensor:
    """Per-position vote transforms: u [K,Wc,Hc,P,D_p] -> u_hat [K,N,L,D_l] with N = Wc*Hc*P."""
    g = model.geometry
    k = u.shape[0]
    n = g.n_inputs
    ur = u.reshape(k, n, g.primary_dim).transpose(1, 0, 2)  # N,K,Dp
    w = model["vote_w"].transpose(0, 1, 2, 4, 3, 5).reshape(n, g.primary_dim, g.n_latent * g.latent_dim)
    uh = T.matmul(ur, w)  # N,K,L*Dl
    return uh.reshape(n, k, g.n_latent, g.latent_dim).transpose(1, 0, 2, 3)


@dataclass
class RoutingOutput:
    v: Tensor  # [K,L,D_l]
    c: np.ndarray  # [K,Wc,Hc,P,L]
    psi: np.ndarray | None = None  # [K,L], filled by the sparse controller
    c_history: list[np.ndarray] | None = None


def dynamic_routing(u_hat: Tensor, iterations: int = 3, grid: tuple[int, int, int] | None = None,
                    keep_history: bool = False) -> RoutingOutput:
    """Routing by agreement over u_hat [K,N,L,D].

    ``grid`` (Wc, Hc, P) reshapes the returned coupling coefficients; when
    omitted they stay [K,N,L].
    """
    if iterations < 1:
        raise ValueError(f"routing needs at least one iteration, got {iterations}")
    k, n, l, _ = u_hat.shape
    b = Tensor(np.zeros((k, n, l), dtype=u_hat.data.dtype))
    history = []
    for it in range(iterations):
        c = T.softmax(b, axis=2)
        if keep_history:
            history.append(c.data.copy())
        s = T.reduce_sum(c.reshape(k, n, l, 1) * u_hat, axis=1)
        v = squash(s)
        if it < iterations - 1:
            b = b + T.reduce_sum(u_hat * v.reshape(k, 1, l, -1), axis=-1)
    cc = c.data
    if grid is not None:
        cc = cc.reshape(k, *grid, l)
    return RoutingOutput(v=v, c=cc, c_history=history if keep_history else None)


def encode(images, model: CapsNetModel, keep_history: bool = False) -> RoutingOutput:
    g = model.geometry
    u = primary_caps_forward(images, model)
    uh = votes(u, model)
    return dynamic_routing(uh, g.routing_iterations, (g.grid, g.grid, g.n_primary), keep_history)


def decode(v_masked, model: CapsNetModel) -> Tensor:
    """[K,L,D_l] -> reconstructions [K,canvas^2] in (0,1)."""
    g = model.geometry
    v_masked = T.as_tensor(v_masked)
    width = g.n_latent * g.latent_dim
    if v_masked.ndim < 2 or int(np.prod(v_masked.shape[1:])) != width:
        raise ValueError(f"decoder expects {width} features per sample, got shape {v_masked.shape}")
    h = v_masked.reshape(v_masked.shape[0], width)
    n = model.n_decoder_layers()
    for i in range(n):
        h = T.matmul(h, model[f"dec{i}_w"]) + model[f"dec{i}_b"]
        h = T.relu(h) if i < n - 1 else T.sigmoid(h)
    return h


def reconstruction_loss(recon, target) -> Tensor:
    """Sum of squared pixel errors, averaged over the batch."""
    recon, target = T.as_tensor(recon), T.as_tensor(target)
    if recon.shape != target.shape:
        raise ValueError(f"reconstruction shape {recon.shape} != target shape {target.shape}")
    d = recon - target
    return T.reduce_sum(d * d) * (1.0 / recon.shape[0])
