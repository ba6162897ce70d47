"""Noise schedules, the forward diffusion map and the DDIM reverse step.

Step indices run ``1..T``; ``alpha_bar[0]`` is pinned to 1 so the last reverse
step returns a clean estimate.  Arrays are indexed directly by step, i.e.
``sched.alpha_bar[t]`` is the cumulative retention at step ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "NoiseSchedule",
    "forward_diffuse",
    "ddim_step",
    "ddim_eps_jacobian_scalar",
    "JACOBIAN_MODES",
]

JACOBIAN_MODES = ("paper", "consistent")


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Discrete schedule over ``T`` reverse steps.

    ``alpha_bar``, ``alpha``, ``beta`` and ``sigma`` all have length ``T + 1``;
    entry 0 is the clean-data convention (``alpha_bar[0] = 1``, ``beta[0] = 0``).
    """

    alpha_bar: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        sig = np.asarray(self.sigma, dtype=np.float64)
        if ab.ndim != 1 or ab.size < 2:
            raise ValueError("alpha_bar must be 1-D with at least one step")
        if ab[0] != 1.0:
            raise ValueError("alpha_bar[0] must be exactly 1")
        if not np.all(np.diff(ab) < 0):
            raise ValueError("alpha_bar must be strictly decreasing in t")
        if ab[-1] <= 0:
            raise ValueError("alpha_bar must stay positive")
        if sig.shape != ab.shape or np.any(sig < 0):
            raise ValueError("sigma must be non-negative with the same length as alpha_bar")
        if np.any(sig[1:] ** 2 > 1.0 - ab[:-1] + 1e-15):
            raise ValueError("sigma[t]^2 must not exceed 1 - alpha_bar[t-1]")
        ab.setflags(write=False)
        sig.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)
        object.__setattr__(self, "sigma", sig)

    @property
    def T(self) -> int:
        return self.alpha_bar.size - 1

    @property
    def alpha(self) -> np.ndarray:
        a = np.ones_like(self.alpha_bar)
        a[1:] = self.alpha_bar[1:] / self.alpha_bar[:-1]
        return a

    @property
    def beta(self) -> np.ndarray:
        return 1.0 - self.alpha

    @classmethod
    def linear(
        cls,
        T: int = 50,
        beta_start: float = 1e-4,
        beta_end: float = 2e-2,
        train_steps: int = 1000,
        eta: float = 0.0,
    ) -> "NoiseSchedule":
        """Linear-beta schedule over ``train_steps``, subsampled to ``T`` steps.

        With ``train_steps == T`` the betas are used as-is.  ``eta`` scales the
        usual DDIM stochasticity ``sigma``; 0 gives the deterministic sampler.
        """
        if T < 1 or train_steps < T:
            raise ValueError(f"need 1 <= T <= train_steps, got T={T}, train_steps={train_steps}")
        if not 0 < beta_start <= beta_end < 1:
            raise ValueError("betas must satisfy 0 < beta_start <= beta_end < 1")
        betas = np.linspace(beta_start, beta_end, train_steps, dtype=np.float64)
        full = np.cumprod(1.0 - betas)
        idx = np.round(np.arange(1, T + 1) * train_steps / T).astype(int) - 1
        alpha_bar = np.concatenate([[1.0], full[idx]])
        sigma = np.zeros(T + 1)
        if eta:
            ab_t, ab_prev = alpha_bar[1:], alpha_bar[:-1]
            sigma[1:] = eta * np.sqrt((1 - ab_prev) / (1 - ab_t) * (1 - ab_t / ab_prev))
        return cls(alpha_bar=alpha_bar, sigma=sigma)

    def check_step(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"step {t} out of range 1..{self.T}")
        return t

    def to_dict(self) -> dict:
        return {"alpha_bar": self.alpha_bar.tolist(), "sigma": self.sigma.tolist()}


def forward_diffuse(x0, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    """Sample ``x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    ab = sched.alpha_bar[sched.check_step(t)]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def ddim_step(z_t, eps, t: int, sched: NoiseSchedule, noise=None) -> np.ndarray:
    """One DDIM reverse step ``z_t -> z_{t-1}``.

    For ``sigma[t] > 0`` the direction term uses ``sqrt(1 - ab_{t-1} - sigma^2)``
    and ``noise`` (standard normal, same shape) must be supplied.
    """
    t = sched.check_step(t)
    z_t = np.asarray(z_t, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if not (np.all(np.isfinite(z_t)) and np.all(np.isfinite(eps))):
        raise FloatingPointError(f"non-finite input to ddim_step at t={t}")
    ab_t = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t - 1]
    sig = sched.sigma[t]
    x0_hat = (z_t - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
    out = np.sqrt(ab_prev) * x0_hat + np.sqrt(max(1.0 - ab_prev - sig**2, 0.0)) * eps
    if sig > 0:
        if noise is None:
            raise ValueError("sigma > 0 requires a noise sample")
        out = out + sig * np.asarray(noise, dtype=np.float64)
    return out


def ddim_eps_jacobian_scalar(t: int, sched: NoiseSchedule, mode: str = "paper") -> float:
    """Scalar ``d z_{t-1} / d eps_t`` of the DDIM step.

    ``paper``: ``sqrt(1 - ab_{t-1} - sigma^2) - sqrt(1 - ab_t) / sqrt(alpha_t)``.
    ``consistent``: ``sqrt(1 - ab_{t-1}) - sqrt(ab_{t-1}) sqrt(1 - ab_t) / sqrt(ab_t)``,
    i.e. the derivative of the sigma-free step.  The two coincide when sigma is 0.
    """
    t = sched.check_step(t)
    ab_t = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t - 1]
    if mode == "paper":
        radicand = 1.0 - ab_prev - sched.sigma[t] ** 2
        if radicand < -1e-15:
            raise ValueError(f"1 - alpha_bar[t-1] - sigma^2 < 0 at t={t}")
        alpha_t = ab_t / ab_prev
        return float(np.sqrt(max(radicand, 0.0)) - np.sqrt(1.0 - ab_t) / np.sqrt(alpha_t))
    if mode == "consistent":
        return float(np.sqrt(1.0 - ab_prev) - np.sqrt(ab_prev) * np.sqrt(1.0 - ab_t) / np.sqrt(ab_t))
    raise ValueError(f"unknown jacobian mode {mode!r}; expected one of {JACOBIAN_MODES}")
