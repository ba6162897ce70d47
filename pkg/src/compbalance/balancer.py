"""The dynamic balancer between a fidelity branch and a spatial branch.

Per-pixel coefficient grids are softmaxed into influence maps, which mix the
two branches' predicted noise.  The coefficients are moved by gradient descent
on an attention/box alignment loss measured one DDIM step ahead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttnMaps
from .conditions import Layout, layout_masks
from .schedule import NoiseSchedule, ddim_eps_jacobian_scalar, ddim_step

__all__ = [
    "CoeMap",
    "XiMap",
    "BalancerConfig",
    "BalancerGradient",
    "init_coe",
    "softmax_xi",
    "balance_noise",
    "box_ratio",
    "alignment_loss",
    "loss_attn_cotangent",
    "loss_cotangent",
    "lookahead_loss",
    "coe_gradient",
    "update_coe",
    "GRADIENT_MODES",
    "DENOMINATOR_FLOOR",
]

GRADIENT_MODES = ("paper", "full")
DENOMINATOR_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class CoeMap:
    text: np.ndarray
    spatial: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.text, dtype=np.float64)
        b = np.asarray(self.spatial, dtype=np.float64)
        if a.ndim != 2 or a.shape != b.shape:
            raise ValueError(f"coefficient grids must be equal-shaped 2-D arrays, got {a.shape} and {b.shape}")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise FloatingPointError("coefficients must be finite")
        object.__setattr__(self, "text", a)
        object.__setattr__(self, "spatial", b)

    @property
    def shape(self):
        return self.text.shape


@dataclass(frozen=True, eq=False)
class XiMap:
    text: np.ndarray
    spatial: np.ndarray

    def normalization_error(self) -> float:
        return float(np.abs(self.text + self.spatial - 1.0).max())


@dataclass(frozen=True)
class BalancerConfig:
    rho: float = 0.1
    rho_end: float | None = None
    inner_updates: int = 1
    gradient_mode: str = "paper"
    jacobian_mode: str = "paper"

    def __post_init__(self):
        if not (np.isfinite(self.rho) and self.rho > 0):
            raise ValueError(f"update rate must be finite and positive, got {self.rho}")
        if self.rho_end is not None and not (np.isfinite(self.rho_end) and self.rho_end > 0):
            raise ValueError(f"final update rate must be finite and positive, got {self.rho_end}")
        if self.inner_updates < 0:
            raise ValueError("inner_updates must be >= 0")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ValueError(f"gradient_mode must be one of {GRADIENT_MODES}")
        if self.jacobian_mode not in ("paper", "consistent"):
            raise ValueError("jacobian_mode must be 'paper' or 'consistent'")

    def rho_at(self, t: int, T: int) -> float:
        """Constant rate, or a linear decay from ``rho`` at ``t = T`` to ``rho_end`` at ``t = 1``."""
        if self.rho_end is None or T == 1:
            return self.rho
        frac = (t - 1) / (T - 1)
        return self.rho_end + (self.rho - self.rho_end) * frac


def init_coe(height: int, width: int, seed) -> CoeMap:
    """One standard-normal grid, shared by both branches.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if height < 1 or width < 1:
        raise ValueError("coefficient grid needs positive dimensions")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.Generator(np.random.Philox(seed))
    grid = rng.standard_normal((height, width))
    return CoeMap(grid, grid.copy())


def softmax_xi(coe: CoeMap) -> XiMap:
    if not (np.all(np.isfinite(coe.text)) and np.all(np.isfinite(coe.spatial))):
        raise FloatingPointError("non-finite coefficients")
    m = np.maximum(coe.text, coe.spatial)
    et = np.exp(coe.text - m)
    es = np.exp(coe.spatial - m)
    total = et + es
    return XiMap(et / total, es / total)


def balance_noise(xi: XiMap, eps_text, eps_spatial) -> np.ndarray:
    """Pixel-wise convex mix of the branch noises; ``xi`` broadcasts over channels."""
    eps_text = np.asarray(eps_text, dtype=np.float64)
    eps_spatial = np.asarray(eps_spatial, dtype=np.float64)
    if eps_text.shape != eps_spatial.shape or eps_text.shape[:2] != xi.text.shape:
        raise ValueError(
            f"shape mismatch: xi {xi.text.shape}, eps_text {eps_text.shape}, eps_spatial {eps_spatial.shape}"
        )
    return xi.text[..., None] * eps_text + xi.spatial[..., None] * eps_spatial


def _check_mask(attn: AttnMaps, mask, token_index: int):
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != attn.resolution:
        raise ValueError(f"mask resolution {mask.shape} != attention resolution {attn.resolution}")
    if not 0 <= token_index < attn.n_tokens:
        raise ValueError(f"token index {token_index} outside 0..{attn.n_tokens - 1}")
    return mask


def box_ratio(attn: AttnMaps, mask, token_index: int) -> float:
    """Fraction of a token's attention mass that falls inside ``mask``."""
    mask = _check_mask(attn, mask, token_index)
    a = attn.token(token_index)
    return float(np.sum(a * mask) / max(np.sum(a), DENOMINATOR_FLOOR))


def alignment_loss(attn_text: AttnMaps, attn_spatial: AttnMaps, masks) -> float:
    """Sum over both branches and all boxes of ``1 - in-box attention ratio``."""
    total = 0.0
    for attn in (attn_text, attn_spatial):
        for mask, j in masks:
            total += 1.0 - box_ratio(attn, mask, j)
    return total


def loss_attn_cotangent(attn: AttnMaps, mask, token_index: int) -> np.ndarray:
    """Derivative of one box's loss term w.r.t. the token's attention column."""
    mask = _check_mask(attn, mask, token_index)
    a = attn.token(token_index)
    inside = np.sum(a * mask)
    total = max(np.sum(a), DENOMINATOR_FLOOR)
    return (inside - mask * total) / total**2


def loss_cotangent(attn: AttnMaps, masks) -> np.ndarray:
    """Full ``(H, W, N)`` cotangent of one branch's share of the loss."""
    cot = np.zeros_like(attn.maps)
    for mask, j in masks:
        cot[:, :, j] += loss_attn_cotangent(attn, mask, j)
    return cot


def lookahead_loss(z_t, t, coe, eps_text, eps_spatial, fidelity, spatial, tokens, layout: Layout, sched, noise=None) -> float:
    """Alignment loss of both branches' attention at the provisional ``z_{t-1}``."""
    z_t = np.asarray(z_t, dtype=np.float64)
    masks = layout_masks(layout, z_t.shape[0], z_t.shape[1])
    z_prev = ddim_step(z_t, balance_noise(softmax_xi(coe), eps_text, eps_spatial), t, sched, noise)
    a_text = fidelity.denoise(z_prev, t, tokens).attn
    a_spat = spatial.denoise(z_prev, t, tokens, layout).attn
    return alignment_loss(a_text, a_spat, masks)


@dataclass(frozen=True, eq=False)
class BalancerGradient:
    text: np.ndarray
    spatial: np.ndarray
    loss: float
    z_prev: np.ndarray
    attn_text: AttnMaps
    attn_spatial: AttnMaps

    @property
    def norms(self) -> tuple[float, float]:
        return float(np.linalg.norm(self.text)), float(np.linalg.norm(self.spatial))


def coe_gradient(
    z_t,
    t: int,
    coe: CoeMap,
    fidelity,
    spatial,
    tokens,
    layout: Layout,
    sched: NoiseSchedule,
    config: BalancerConfig,
    eps_text=None,
    eps_spatial=None,
    noise=None,
) -> BalancerGradient:
    """Gradient of the look-ahead alignment loss w.r.t. both coefficient grids.

    ``eps_text``/``eps_spatial`` are the branch predictions at ``z_t``; they are
    computed here when omitted.  In ``paper`` mode each branch only sees its own
    noise as ``d eps / d xi``; ``full`` mode adds the softmax cross-term and is
    the exact gradient (given a matching Jacobian scalar).
    """
    z_t = np.asarray(z_t, dtype=np.float64)
    if eps_text is None:
        eps_text = fidelity.denoise(z_t, t, tokens).eps
    if eps_spatial is None:
        eps_spatial = spatial.denoise(z_t, t, tokens, layout).eps
    masks = layout_masks(layout, z_t.shape[0], z_t.shape[1])
    xi = softmax_xi(coe)
    z_prev = ddim_step(z_t, balance_noise(xi, eps_text, eps_spatial), t, sched, noise)

    a_text = fidelity.denoise(z_prev, t, tokens).attn
    a_spat = spatial.denoise(z_prev, t, tokens, layout).attn
    loss = alignment_loss(a_text, a_spat, masks)

    dz = fidelity.attention_vjp(z_prev, t, tokens, None, loss_cotangent(a_text, masks))
    dz = dz + spatial.attention_vjp(z_prev, t, tokens, layout, loss_cotangent(a_spat, masks))
    d_eps = ddim_eps_jacobian_scalar(t, sched, config.jacobian_mode) * dz
    gate = xi.text * xi.spatial
    g_text = gate * np.sum(d_eps * eps_text, axis=-1)
    g_spat = gate * np.sum(d_eps * eps_spatial, axis=-1)
    if config.gradient_mode == "full":
        g_text, g_spat = g_text - g_spat, g_spat - g_text
    if not (np.all(np.isfinite(g_text)) and np.all(np.isfinite(g_spat))):
        raise FloatingPointError(f"non-finite coefficient gradient at t={t}")
    return BalancerGradient(g_text, g_spat, loss, z_prev, a_text, a_spat)


def update_coe(coe: CoeMap, grad, rho_t: float) -> CoeMap:
    """One descent step on both grids; ``grad`` is a ``(text, spatial)`` pair or a gradient object."""
    g_text, g_spat = (grad.text, grad.spatial) if hasattr(grad, "text") else grad
    g_text = np.asarray(g_text, dtype=np.float64)
    g_spat = np.asarray(g_spat, dtype=np.float64)
    if g_text.shape != coe.shape or g_spat.shape != coe.shape:
        raise ValueError("gradient shape does not match the coefficient grid")
    if not (np.all(np.isfinite(g_text)) and np.all(np.isfinite(g_spat))):
        raise FloatingPointError("refusing a non-finite coefficient gradient")
    return CoeMap(coe.text - rho_t * g_text, coe.spatial - rho_t * g_spat)
