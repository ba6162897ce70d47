"""Denoisers: the branch contract plus analytic, gated and micro implementations.

Every denoiser exposes

* ``denoise(z_t, t, tokens, cond=None) -> DenoiserOutput`` and
* ``attention_vjp(z_t, t, tokens, cond, cotangent) -> dL/dz_t``,

the latter pulling a cotangent on the attention maps back to the latent.
Fidelity-branch denoisers ignore ``cond``; spatial-branch ones require it.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
from scipy.special import softmax

from .attention import AttnMaps, AttnProjection, TokenSequence, attention_vjp, compute_attention
from .conditions import Layout, layout_masks
from .schedule import NoiseSchedule, forward_diffuse
from .testbed import MixtureSpec

__all__ = [
    "DenoiserOutput",
    "GateConfig",
    "AnalyticDenoiser",
    "GaussianDenoiser",
    "GatedSpatialDenoiser",
    "MicroParams",
    "MicroDenoiser",
    "responsibilities",
    "analytic_eps",
    "analytic_attention",
    "gated_spatial_eps",
    "micro_denoise",
    "save_micro_params",
    "load_micro_params",
    "train_micro_head",
]


DEFAULT_ATTN_FLOOR = 0.5


@dataclass(frozen=True, eq=False)
class DenoiserOutput:
    eps: np.ndarray
    attn: AttnMaps


def _check_latent(z, shape) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != tuple(shape):
        raise ValueError(f"latent shape {z.shape} does not match denoiser shape {tuple(shape)}")
    return z


def _noise_level(t: int, sched: NoiseSchedule) -> tuple[float, float]:
    ab = sched.alpha_bar[sched.check_step(t)]
    var = 1.0 - ab
    if var <= 0:
        raise ValueError(f"1 - alpha_bar is zero at t={t}")
    return float(np.sqrt(ab)), float(var)


def responsibilities(z_t, t: int, spec: MixtureSpec, sched: NoiseSchedule, var_floor: float = 0.0) -> np.ndarray:
    """Posterior component probabilities ``r_k`` given ``z_t``.

    ``var_floor`` lower-bounds the noise variance used in the Gaussian
    likelihood; it tempers the assignment at low noise (0 gives the exact posterior).
    """
    z = _check_latent(z_t, spec.shape)
    s, var = _noise_level(t, sched)
    d2 = np.sum((z[None] - s * spec.means) ** 2, axis=(1, 2, 3))
    return softmax(np.log(spec.weights) - d2 / (2 * max(var, var_floor)))


def analytic_eps(z_t, t: int, spec: MixtureSpec, sched: NoiseSchedule) -> np.ndarray:
    """Exact noise prediction ``-sqrt(1 - ab) * score`` for the mixture marginal."""
    z = _check_latent(z_t, spec.shape)
    s, var = _noise_level(t, sched)
    r = responsibilities(z, t, spec, sched)
    x0_hat = np.tensordot(r, spec.means, axes=1)
    return (z - s * x0_hat) / np.sqrt(var)


def analytic_attention(
    z_t, t: int, spec: MixtureSpec, sched: NoiseSchedule, attn_floor: float = DEFAULT_ATTN_FLOOR
) -> AttnMaps:
    """Responsibility-weighted blob profiles; the remainder goes to the background token."""
    r = responsibilities(z_t, t, spec, sched, attn_floor)
    return AttnMaps(np.tensordot(r, spec.profiles, axes=1))


class AnalyticDenoiser:
    """Exact-score denoiser for a blobworld mixture.

    With ``spatial=True`` it acts as the spatial branch: ``spec`` is expected to
    be the layout-restricted mixture and a condition must accompany each call.
    Attention maps use responsibilities tempered by ``attn_floor`` so they stay
    soft (and differentiable) near the end of sampling; the noise prediction
    always uses the exact posterior.
    """

    def __init__(
        self, spec: MixtureSpec, sched: NoiseSchedule, spatial: bool = False, attn_floor: float = DEFAULT_ATTN_FLOOR
    ):
        if attn_floor < 0:
            raise ValueError("attn_floor must be non-negative")
        self.spec = spec
        self.sched = sched
        self.spatial = spatial
        self.attn_floor = attn_floor

    @property
    def shape(self):
        return self.spec.shape

    def _check(self, tokens, cond):
        if self.spatial and cond is None:
            raise ValueError("the spatial branch needs a layout condition")
        if tokens is not None and len(tokens) != self.spec.n_tokens:
            raise ValueError(f"{len(tokens)} tokens given, mixture was built for {self.spec.n_tokens}")

    def denoise(self, z_t, t, tokens=None, cond=None) -> DenoiserOutput:
        self._check(tokens, cond)
        z = _check_latent(z_t, self.shape)
        s, var = _noise_level(t, self.sched)
        r = responsibilities(z, t, self.spec, self.sched)
        x0_hat = np.tensordot(r, self.spec.means, axes=1)
        eps = (z - s * x0_hat) / np.sqrt(var)
        if self.attn_floor > var:
            r = responsibilities(z, t, self.spec, self.sched, self.attn_floor)
        return DenoiserOutput(eps, AttnMaps(np.tensordot(r, self.spec.profiles, axes=1)))

    def attention_vjp(self, z_t, t, tokens, cond, cotangent) -> np.ndarray:
        self._check(tokens, cond)
        z = _check_latent(z_t, self.shape)
        s, var = _noise_level(t, self.sched)
        var = max(var, self.attn_floor)
        r = responsibilities(z, t, self.spec, self.sched, self.attn_floor)
        g = np.tensordot(self.spec.profiles, np.asarray(cotangent, dtype=np.float64), axes=3)
        a = r * (g - r @ g)
        # d logit_k / dz = -(z - s mu_k) / var; the z term cancels since sum(a) == 0
        return (s / var) * np.tensordot(a, self.spec.means, axes=1)


class GaussianDenoiser:
    """Exact denoiser for independent Gaussian data ``N(mean, diag(var))``.

    Works elementwise, so latents may carry any leading batch axes.
    """

    def __init__(self, mean, var, sched: NoiseSchedule):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.var = np.broadcast_to(np.asarray(var, dtype=np.float64), self.mean.shape)
        if np.any(self.var < 0):
            raise ValueError("data variance must be non-negative")
        self.sched = sched

    def eps(self, z_t, t) -> np.ndarray:
        s, v = _noise_level(t, self.sched)
        z = np.asarray(z_t, dtype=np.float64)
        return (z - s * self.mean) * np.sqrt(v) / (s * s * self.var + v)


@dataclass(frozen=True)
class GateConfig:
    beta: float = 1.0
    cutoff_step: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"gate beta must lie in [0, 1], got {self.beta}")

    def strength(self, t: int) -> float:
        if self.cutoff_step is not None and t < self.cutoff_step:
            return 0.0
        return self.beta


def gated_spatial_eps(z_t, t, tokens, layout, gate: GateConfig, text_spec, layout_spec, sched) -> np.ndarray:
    """``(1 - beta) eps_text + beta eps_layout`` with the gate closed below ``cutoff_step``."""
    if text_spec.shape != layout_spec.shape:
        raise ValueError("text and layout mixtures must share a shape")
    if layout is None:
        raise ValueError("gated spatial denoiser needs a layout")
    beta = gate.strength(t)
    e_text = analytic_eps(z_t, t, text_spec, sched)
    if beta == 0.0:
        return e_text
    e_layout = analytic_eps(z_t, t, layout_spec, sched)
    if beta == 1.0:
        return e_layout
    return (1.0 - beta) * e_text + beta * e_layout


class GatedSpatialDenoiser:
    """Spatial branch whose layout influence is scaled by a gate ``beta``."""

    spatial = True

    def __init__(self, text_spec: MixtureSpec, layout_spec: MixtureSpec, sched: NoiseSchedule, gate: GateConfig):
        self.text = AnalyticDenoiser(text_spec, sched)
        self.layout = AnalyticDenoiser(layout_spec, sched, spatial=True)
        self.sched = sched
        self.gate = gate

    @property
    def shape(self):
        return self.text.shape

    def denoise(self, z_t, t, tokens=None, cond=None) -> DenoiserOutput:
        if cond is None:
            raise ValueError("the spatial branch needs a layout condition")
        beta = self.gate.strength(t)
        a = self.text.denoise(z_t, t, tokens)
        b = self.layout.denoise(z_t, t, tokens, cond)
        return DenoiserOutput(
            (1.0 - beta) * a.eps + beta * b.eps,
            AttnMaps((1.0 - beta) * a.attn.maps + beta * b.attn.maps),
        )

    def attention_vjp(self, z_t, t, tokens, cond, cotangent) -> np.ndarray:
        beta = self.gate.strength(t)
        return (1.0 - beta) * self.text.attention_vjp(z_t, t, tokens, None, cotangent) + beta * self.layout.attention_vjp(
            z_t, t, tokens, cond, cotangent
        )


# --------------------------------------------------------------------------- micro


@dataclass(frozen=True, eq=False)
class MicroParams:
    """Weights of the micro cross-attention denoiser (row-vector convention).

    ``W_lift`` maps ``[z, x, y]`` per pixel to ``d_f`` features; ``W_V`` maps
    token embeddings to values, ``W_head`` values to noise, and ``W_res``
    adds a per-pixel linear skip from the latent.
    """

    W_lift: np.ndarray
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_head: np.ndarray
    W_res: np.ndarray
    gamma: float = 2.0

    def __post_init__(self):
        for f in fields(self):
            if f.name == "gamma":
                continue
            arr = np.asarray(getattr(self, f.name), dtype=np.float64)
            if arr.ndim != 2 or not np.all(np.isfinite(arr)):
                raise ValueError(f"{f.name} must be a finite 2-D matrix")
            object.__setattr__(self, f.name, arr)
        c = self.W_res.shape[0]
        d_f, d_k, d_v = self.W_lift.shape[1], self.W_K.shape[0], self.W_V.shape[1]
        expected = {
            "W_lift": (c + 2, d_f),
            "W_Q": (d_f, d_k),
            "W_K": (d_k, d_k),
            "W_V": (d_k, d_v),
            "W_head": (d_v, c),
            "W_res": (c, c),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def channels(self) -> int:
        return self.W_res.shape[0]

    @property
    def projection(self) -> AttnProjection:
        return AttnProjection(self.W_Q, self.W_K)

    @classmethod
    def random(cls, channels=3, d_f=8, d_k=8, d_v=8, seed=0, scale=1.0, gamma=2.0) -> "MicroParams":
        rng = np.random.Generator(np.random.Philox(seed))

        def mat(rows, cols):
            return scale * rng.standard_normal((rows, cols)) / np.sqrt(rows)

        return cls(
            W_lift=mat(channels + 2, d_f),
            W_Q=mat(d_f, d_k),
            W_K=mat(d_k, d_k),
            W_V=mat(d_k, d_v),
            W_head=mat(d_v, channels),
            W_res=mat(channels, channels),
            gamma=gamma,
        )

    @classmethod
    def zeros(cls, channels=3, d_f=8, d_k=8, d_v=8) -> "MicroParams":
        z = np.zeros
        return cls(z((channels + 2, d_f)), z((d_f, d_k)), z((d_k, d_k)), z((d_k, d_v)), z((d_v, channels)), z((channels, channels)))


def _coords(height: int, width: int) -> np.ndarray:
    ys = (np.arange(height) + 0.5) / height
    xs = (np.arange(width) + 0.5) / width
    return np.stack(np.meshgrid(xs, ys), axis=-1)


def _micro_features(z, params: MicroParams) -> np.ndarray:
    h, w, _ = z.shape
    return np.concatenate([z, _coords(h, w)], axis=-1) @ params.W_lift


def _micro_bias(shape, tokens, cond: Layout | None, gamma: float):
    if cond is None:
        return None
    h, w = shape[:2]
    bias = np.zeros((h, w, len(tokens)))
    for mask, j in layout_masks(cond, h, w):
        bias[:, :, j] += gamma * mask
    return bias


def micro_denoise(z_t, t, tokens: TokenSequence, cond: Layout | None, params: MicroParams) -> DenoiserOutput:
    """Lift -> cross-attention -> value mixing -> linear head, plus a linear skip.

    A layout ``cond`` adds ``gamma`` to the logits of each box's token inside its mask.
    """
    z = np.asarray(z_t, dtype=np.float64)
    if z.ndim != 3 or z.shape[-1] != params.channels:
        raise ValueError(f"latent must be (H, W, {params.channels}), got {z.shape}")
    feats = _micro_features(z, params)
    attn = compute_attention(feats, tokens, params.projection, _micro_bias(z.shape, tokens, cond, params.gamma))
    values = tokens.embeddings @ params.W_V
    eps = (attn.maps @ values) @ params.W_head + z @ params.W_res
    return DenoiserOutput(eps, attn)


class MicroDenoiser:
    """Branch wrapper around :func:`micro_denoise`."""

    def __init__(self, params: MicroParams, sched: NoiseSchedule, shape, spatial: bool = False):
        self.params = params
        self.sched = sched
        self.shape = tuple(shape)
        self.spatial = spatial

    def _cond(self, cond):
        if self.spatial and cond is None:
            raise ValueError("the spatial branch needs a layout condition")
        return cond if self.spatial else None

    def denoise(self, z_t, t, tokens, cond=None) -> DenoiserOutput:
        self.sched.check_step(t)
        z = _check_latent(z_t, self.shape)
        return micro_denoise(z, t, tokens, self._cond(cond), self.params)

    def attention_vjp(self, z_t, t, tokens, cond, cotangent) -> np.ndarray:
        z = _check_latent(z_t, self.shape)
        p = self.params
        bias = _micro_bias(z.shape, tokens, self._cond(cond), p.gamma)
        d_feat = attention_vjp(_micro_features(z, p), tokens, p.projection, cotangent, bias)
        return d_feat @ p.W_lift[: p.channels].T


_MAGIC = b"CBMP"
_PARAM_VERSION = 1
_PARAM_NAMES = ("W_lift", "W_Q", "W_K", "W_V", "W_head", "W_res")


def save_micro_params(params: MicroParams, path) -> None:
    """Flat little-endian float64 tensor file behind a versioned JSON header."""
    header = json.dumps(
        {"gamma": params.gamma, "tensors": [[n, list(getattr(params, n).shape)] for n in _PARAM_NAMES]}
    ).encode()
    body = b"".join(getattr(params, n).astype("<f8").tobytes() for n in _PARAM_NAMES)
    Path(path).write_bytes(_MAGIC + struct.pack("<II", _PARAM_VERSION, len(header)) + header + body)


def load_micro_params(path) -> MicroParams:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path} is not a micro-denoiser parameter file")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != _PARAM_VERSION:
        raise ValueError(f"unsupported parameter file version {version}")
    header = json.loads(raw[12 : 12 + hlen])
    offset = 12 + hlen
    arrays = {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape))
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape).copy()
        offset += 8 * n
    if offset != len(raw):
        raise ValueError("trailing bytes in parameter file")
    return MicroParams(gamma=header["gamma"], **arrays)


def train_micro_head(
    params: MicroParams,
    spec: MixtureSpec,
    sched: NoiseSchedule,
    tokens: TokenSequence,
    steps: int = 200,
    lr: float = 0.05,
    batch: int = 8,
    seed: int = 0,
) -> tuple[MicroParams, list[float]]:
    """Fit ``W_head`` and ``W_res`` to the squared noise-prediction error.

    The attention path stays frozen, so the gradients are those of two
    linear layers.  Returns the new parameters and the per-step loss.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    values = tokens.embeddings @ params.W_V
    W_head, W_res = params.W_head.copy(), params.W_res.copy()
    history = []
    for _ in range(steps):
        g_head = np.zeros_like(W_head)
        g_res = np.zeros_like(W_res)
        loss = 0.0
        for _ in range(batch):
            k = rng.choice(len(spec), p=spec.weights)
            t = int(rng.integers(1, sched.T + 1))
            eps = rng.standard_normal(spec.shape)
            x_t = forward_diffuse(spec.means[k], t, eps, sched)
            mixed = micro_denoise(x_t, t, tokens, None, params).attn.maps @ values
            resid = mixed @ W_head + x_t @ W_res - eps
            n = resid.size
            loss += np.sum(resid**2) / n
            g_head += 2 * np.tensordot(mixed, resid, axes=([0, 1], [0, 1])) / n
            g_res += 2 * np.tensordot(x_t, resid, axes=([0, 1], [0, 1])) / n
        W_head -= lr * g_head / batch
        W_res -= lr * g_res / batch
        history.append(loss / batch)
    return replace(params, W_head=W_head, W_res=W_res), history
