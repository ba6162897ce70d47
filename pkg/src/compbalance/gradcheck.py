"""Finite-difference checks for the coefficient gradient and attention VJPs.

Each check compares an analytic derivative against central differences on a
small instance and reports the worst per-cell relative error.  The error of a
cell is measured against the largest of its reference value, a floor of
``floor_frac * max|reference|`` (so sign noise around zero does not dominate)
and the rounding noise of the difference quotient, ``10 eps (1 + |f|) / h``
divided by the tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import TokenSequence
from .balancer import BalancerConfig, CoeMap, coe_gradient, lookahead_loss
from .denoisers import AnalyticDenoiser, MicroDenoiser, MicroParams
from .layoutgen import stub_layout
from .schedule import NoiseSchedule, forward_diffuse
from .testbed import build_text_mixture, restrict_to_layout

__all__ = ["CheckResult", "GradInstance", "make_instance", "check_coe_gradient", "check_attention_vjp", "run_gradcheck"]

DEFAULT_PROMPT = "a red cube and a blue ball"


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_error: float
    worst_cell: tuple
    rtol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.rtol)

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{status:4s} {self.name:40s} max_rel_err={self.max_rel_error:.3e} worst={self.worst_cell}"


@dataclass(frozen=True, eq=False)
class GradInstance:
    z: np.ndarray
    t: int
    coe: CoeMap
    fidelity: object
    spatial: object
    tokens: TokenSequence
    layout: object
    sched: NoiseSchedule
    noise: np.ndarray | None


def make_instance(
    kind: str = "analytic",
    size: int = 8,
    t: int = 25,
    seed: int = 0,
    eta: float = 0.0,
    prompt: str = DEFAULT_PROMPT,
    box_imprint: float = 0.25,
) -> GradInstance:
    """A seeded ``size x size`` latent with a two-box stub layout and random coefficients."""
    layout = stub_layout(prompt)
    tokens = TokenSequence.from_prompt(prompt).with_objects(layout.token_indices)
    sched = NoiseSchedule.linear(eta=eta)
    spec = build_text_mixture(tokens, size, size)
    rng = np.random.default_rng(seed)
    if kind == "analytic":
        fidelity = AnalyticDenoiser(spec, sched)
        spatial = AnalyticDenoiser(restrict_to_layout(spec, layout, box_imprint), sched, spatial=True)
    elif kind == "micro":
        fidelity = MicroDenoiser(MicroParams.random(seed=seed + 101), sched, spec.shape)
        spatial = MicroDenoiser(MicroParams.random(seed=seed + 202), sched, spec.shape, spatial=True)
    else:
        raise ValueError(f"unknown denoiser kind {kind!r}")
    x0 = spec.means[rng.integers(len(spec))]
    z = forward_diffuse(x0, t, rng.standard_normal(spec.shape), sched)
    coe = CoeMap(rng.standard_normal((size, size)), rng.standard_normal((size, size)))
    noise = rng.standard_normal(spec.shape) if sched.sigma[t] > 0 else None
    return GradInstance(z, t, coe, fidelity, spatial, tokens, layout, sched, noise)


def _rounding_noise(value: float, step: float) -> float:
    return 10 * np.finfo(float).eps * (1.0 + abs(value)) / step


def _compare(name, analytic, reference, rtol, floor_frac, noise=0.0) -> CheckResult:
    analytic = np.asarray(analytic)
    reference = np.asarray(reference)
    floor = max(floor_frac * np.abs(reference).max(), noise / rtol, 1e-300)
    scale = np.maximum(np.abs(reference), floor)
    rel = np.abs(analytic - reference) / scale
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape)
    return CheckResult(name, float(rel.max()), tuple(int(i) for i in worst), rtol)


def check_coe_gradient(
    inst: GradInstance,
    config: BalancerConfig,
    label: str = "",
    rtol: float = 1e-3,
    step: float = 1e-4,
    floor_frac: float = 1e-3,
) -> list[CheckResult]:
    """FD of the look-ahead loss against :func:`coe_gradient`, for both coefficient grids."""
    e_text = inst.fidelity.denoise(inst.z, inst.t, inst.tokens).eps
    e_spat = inst.spatial.denoise(inst.z, inst.t, inst.tokens, inst.layout).eps
    grad = coe_gradient(
        inst.z, inst.t, inst.coe, inst.fidelity, inst.spatial, inst.tokens, inst.layout, inst.sched, config,
        eps_text=e_text, eps_spatial=e_spat, noise=inst.noise,
    )

    def loss(coe):
        return lookahead_loss(
            inst.z, inst.t, coe, e_text, e_spat, inst.fidelity, inst.spatial, inst.tokens, inst.layout,
            inst.sched, inst.noise,
        )

    results = []
    for which, analytic in (("text", grad.text), ("spatial", grad.spatial)):
        fd = np.zeros(inst.coe.shape)
        base = getattr(inst.coe, which)
        for idx in np.ndindex(*inst.coe.shape):
            plus, minus = base.copy(), base.copy()
            plus[idx] += step
            minus[idx] -= step
            other = {"text": inst.coe.text, "spatial": inst.coe.spatial}
            fd[idx] = (loss(CoeMap(**{**other, which: plus})) - loss(CoeMap(**{**other, which: minus}))) / (2 * step)
        noise = _rounding_noise(grad.loss, step)
        results.append(_compare(f"{label}coe_gradient[{which}]", analytic, fd, rtol, floor_frac, noise))
    return results


def check_attention_vjp(
    denoiser,
    inst: GradInstance,
    cond=None,
    label: str = "",
    rtol: float = 1e-3,
    step: float = 1e-5,
    floor_frac: float = 1e-3,
    seed: int = 0,
) -> CheckResult:
    """FD of ``<A(z), cotangent>`` against the denoiser's attention VJP."""
    z = inst.z
    maps = denoiser.denoise(z, inst.t, inst.tokens, cond).attn.maps
    cot = np.random.default_rng(seed).standard_normal(maps.shape)
    analytic = denoiser.attention_vjp(z, inst.t, inst.tokens, cond, cot)
    fd = np.zeros(z.shape)
    for idx in np.ndindex(*z.shape):
        plus, minus = z.copy(), z.copy()
        plus[idx] += step
        minus[idx] -= step
        a_p = denoiser.denoise(plus, inst.t, inst.tokens, cond).attn.maps
        a_m = denoiser.denoise(minus, inst.t, inst.tokens, cond).attn.maps
        fd[idx] = np.sum((a_p - a_m) * cot) / (2 * step)
    noise = _rounding_noise(np.abs(maps * cot).sum(), step)
    return _compare(f"{label}attention_vjp", analytic, fd, rtol, floor_frac, noise)


def run_gradcheck(
    size: int = 8,
    steps=(25, 10),
    seed: int = 0,
    eta: float = 0.0,
    gradient_mode: str = "full",
    jacobian_mode: str = "paper",
    rtol: float = 1e-3,
    kinds=("analytic", "micro"),
) -> list[CheckResult]:
    """The full suite: coefficient gradients and both branches' VJPs per denoiser kind and step."""
    config = BalancerConfig(gradient_mode=gradient_mode, jacobian_mode=jacobian_mode)
    results = []
    for kind in kinds:
        for t in steps:
            inst = make_instance(kind, size, t, seed, eta)
            tag = f"{kind} t={t} "
            results.extend(check_coe_gradient(inst, config, tag, rtol))
            results.append(check_attention_vjp(inst.fidelity, inst, None, tag + "fidelity ", rtol, seed=seed))
            results.append(check_attention_vjp(inst.spatial, inst, inst.layout, tag + "spatial ", rtol, seed=seed))
    return results
