"""Compositional denoising rollouts, metrics and experiment drivers."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp
from scipy.stats import spearmanr

from . import rng as rngmod
from .attention import AttnMaps, TokenSequence
from .balancer import (
    BalancerConfig,
    balance_noise,
    box_ratio,
    coe_gradient,
    init_coe,
    softmax_xi,
    update_coe,
)
from .conditions import (
    Layout,
    layout_masks,
    load_keypoints,
    load_layout,
    read_segmentation_pgm,
    transfer,
)
from .denoisers import AnalyticDenoiser, GatedSpatialDenoiser, GateConfig, MicroDenoiser, MicroParams, load_micro_params
from .layoutgen import LlmEndpointConfig, generate_layout
from .schedule import NoiseSchedule, ddim_step
from .testbed import MixtureSpec, build_text_mixture, load_mixture, restrict_to_layout

__all__ = [
    "ScheduleConfig",
    "TestbedConfig",
    "ConditionConfig",
    "MicroConfig",
    "RunConfig",
    "StepRecord",
    "Metrics",
    "RunResult",
    "Scene",
    "build_scene",
    "run",
    "evaluate",
    "realism_proxy",
    "in_box_mass",
    "sweep_beta",
    "sweep_spearman",
    "resolve_layout",
    "ablate",
    "config_from_dict",
    "config_hash",
    "RolloutError",
]

log = logging.getLogger(__name__)


# ----------------------------------------------------------------------------- config


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    train_steps: int = 1000
    eta: float = 0.0

    def build(self) -> NoiseSchedule:
        return NoiseSchedule.linear(self.T, self.beta_start, self.beta_end, max(self.train_steps, self.T), self.eta)


@dataclass(frozen=True)
class TestbedConfig:
    height: int = 16
    width: int = 16
    channels: int = 3
    radius: float = 2.5
    anchors_per_side: int = 4
    max_objects: int = 2
    box_imprint: float = 0.25
    mixture_file: str | None = None


@dataclass(frozen=True)
class ConditionConfig:
    """Where the layout comes from: ``layoutgen``, ``layout``, ``keypoints`` or ``segmentation``."""

    source: str = "layoutgen"
    path: str | None = None
    pad: float = 0.05
    llm_base_url: str | None = None
    llm_model: str = "gpt-4"
    llm_api_key_env: str = "LAYOUT_LLM_API_KEY"
    llm_timeout: float = 30.0
    llm_max_retries: int = 2


@dataclass(frozen=True)
class MicroConfig:
    d_f: int = 8
    d_k: int = 8
    d_v: int = 8
    scale: float = 1.0
    gamma: float = 2.0
    seed_text: int = 101
    seed_spatial: int = 202
    params_text: str | None = None
    params_spatial: str | None = None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    prompt: str = "a red cube and a blue ball"
    denoisers: str = "analytic"
    t0: int | None = None
    frozen: bool = False
    token_dim: int = 8
    realism_bandwidth: float = 0.05
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    testbed: TestbedConfig = field(default_factory=TestbedConfig)
    condition: ConditionConfig = field(default_factory=ConditionConfig)
    balancer: BalancerConfig = field(default_factory=BalancerConfig)
    gate: GateConfig = field(default_factory=GateConfig)
    micro: MicroConfig = field(default_factory=MicroConfig)

    def __post_init__(self):
        if self.denoisers not in ("analytic", "micro"):
            raise ValueError(f"denoisers must be 'analytic' or 'micro', got {self.denoisers!r}")
        if self.t0 is not None and not 0 <= self.t0 <= self.schedule.T:
            raise ValueError(f"t0 must lie in 0..{self.schedule.T}, got {self.t0}")

    @property
    def threshold(self) -> int:
        return self.schedule.T if self.t0 is None else self.t0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "schedule": ScheduleConfig,
    "testbed": TestbedConfig,
    "condition": ConditionConfig,
    "balancer": BalancerConfig,
    "gate": GateConfig,
    "micro": MicroConfig,
}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ValueError(f"config section {where!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown config keys in {where!r}: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data: dict | None) -> RunConfig:
    """Build a :class:`RunConfig` from nested mappings, rejecting unknown keys."""
    data = dict(data or {})
    for name, cls in _SECTIONS.items():
        if name in data:
            data[name] = _build(cls, data[name] or {}, name)
    return _build(RunConfig, data, "top level")


def config_hash(config: RunConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ----------------------------------------------------------------------------- scene


@dataclass(frozen=True, eq=False)
class Scene:
    tokens: TokenSequence
    layout: Layout
    sched: NoiseSchedule
    text_spec: MixtureSpec
    layout_spec: MixtureSpec
    fidelity: object
    spatial: object

    @property
    def shape(self):
        return self.text_spec.shape


def resolve_layout(config: RunConfig) -> tuple[Layout, TokenSequence]:
    """Turn the configured condition source into a layout bound to prompt tokens."""
    cond = config.condition
    base = TokenSequence.from_prompt(config.prompt, config.token_dim)
    lookup = lambda name: base.find(name)  # noqa: E731
    if cond.source == "layoutgen":
        endpoint = None
        if cond.llm_base_url:
            endpoint = LlmEndpointConfig(
                cond.llm_base_url, cond.llm_model, cond.llm_api_key_env, cond.llm_timeout, cond.llm_max_retries
            )
        layout = generate_layout(config.prompt, endpoint)
    elif cond.path is None:
        raise ValueError(f"condition source {cond.source!r} needs a path")
    elif cond.source == "layout":
        layout = load_layout(cond.path, lookup)
    elif cond.source == "keypoints":
        layout = transfer(load_keypoints(cond.path, lookup), pad=cond.pad, names=dict(enumerate(base.tokens)))
    elif cond.source == "segmentation":
        layout = transfer(read_segmentation_pgm(cond.path), pad=cond.pad, names=dict(enumerate(base.tokens)))
    else:
        raise ValueError(f"unknown condition source {cond.source!r}")
    layout.validate_tokens(len(base))
    return layout, base.with_objects(layout.token_indices)


def build_scene(config: RunConfig, gate: GateConfig | None = None) -> Scene:
    """Tokens, layout, schedule, mixtures and the two branch denoisers for a run.

    With ``gate`` the spatial branch is the beta-gated analytic denoiser.
    """
    layout, tokens = resolve_layout(config)
    sched = config.schedule.build()
    tb = config.testbed
    if tb.mixture_file:
        text_spec = load_mixture(tb.mixture_file)
        if text_spec.n_tokens != len(tokens) or set(text_spec.object_tokens) != set(tokens.object_token_indices):
            raise ValueError("mixture file does not match the prompt's object tokens")
    else:
        text_spec = build_text_mixture(
            tokens, tb.height, tb.width, tb.channels, tb.radius, tb.anchors_per_side, tb.max_objects
        )
    layout_spec = restrict_to_layout(text_spec, layout, tb.box_imprint)
    if gate is not None:
        fidelity = AnalyticDenoiser(text_spec, sched)
        spatial = GatedSpatialDenoiser(text_spec, layout_spec, sched, gate)
    elif config.denoisers == "analytic":
        fidelity = AnalyticDenoiser(text_spec, sched)
        spatial = AnalyticDenoiser(layout_spec, sched, spatial=True)
    else:
        m = config.micro
        p_text = load_micro_params(m.params_text) if m.params_text else MicroParams.random(
            tb.channels, m.d_f, config.token_dim, m.d_v, m.seed_text, m.scale, m.gamma
        )
        p_spat = load_micro_params(m.params_spatial) if m.params_spatial else MicroParams.random(
            tb.channels, m.d_f, config.token_dim, m.d_v, m.seed_spatial, m.scale, m.gamma
        )
        fidelity = MicroDenoiser(p_text, sched, text_spec.shape)
        spatial = MicroDenoiser(p_spat, sched, text_spec.shape, spatial=True)
    return Scene(tokens, layout, sched, text_spec, layout_spec, fidelity, spatial)


# ----------------------------------------------------------------------------- records


@dataclass(frozen=True)
class StepRecord:
    t: int
    loss: float
    grad_norm_text: float
    grad_norm_spatial: float
    mean_xi_text: float
    xi_sum_error: float
    wall_time: float

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Metrics:
    in_box_mass: dict[str, float]
    attn_in_box: dict[str, float]
    realism_proxy: float | None
    zero_signal: list[str] = field(default_factory=list)

    @property
    def mean_in_box_mass(self) -> float:
        return float(np.mean(list(self.in_box_mass.values())))

    @property
    def mean_attn_in_box(self) -> float:
        return float(np.mean(list(self.attn_in_box.values()))) if self.attn_in_box else float("nan")

    def to_json(self) -> dict:
        return {
            "in_box_mass": self.in_box_mass,
            "attn_in_box": self.attn_in_box,
            "realism_proxy": self.realism_proxy,
            "zero_signal": self.zero_signal,
            "mean_in_box_mass": self.mean_in_box_mass,
            "mean_attn_in_box": self.mean_attn_in_box,
        }


@dataclass
class RunResult:
    sample: np.ndarray
    metrics: Metrics
    trajectory: list[StepRecord]
    attn_text: AttnMaps
    attn_spatial: AttnMaps
    applied_noise: dict[int, np.ndarray] = field(default_factory=dict)
    spatial_noise: dict[int, np.ndarray] = field(default_factory=dict)
    grids: list[dict] = field(default_factory=list)


class RolloutError(RuntimeError):
    """A rollout produced a non-finite state; ``diagnostics`` holds the context."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


# ----------------------------------------------------------------------------- metrics


def in_box_mass(sample, layout: Layout, colors: dict, tiny: float = 1e-9) -> tuple[dict[str, float], list[str]]:
    """Per object: color-matched non-negative signal inside its box over the total.

    Objects without any signal get 0 and are listed in the second return value.
    """
    sample = np.asarray(sample, dtype=np.float64)
    h, w = sample.shape[:2]
    out, flags = {}, []
    for mask, box in zip((m for m, _ in layout_masks(layout, h, w)), layout.boxes):
        color = colors[box.token_index]
        signal = np.maximum(sample @ color / (color @ color), 0.0)
        total = signal.sum()
        name = box.name or f"token{box.token_index}"
        if total <= tiny:
            out[name] = 0.0
            flags.append(name)
        else:
            out[name] = float((signal * mask).sum() / total)
    return out, flags


def realism_proxy(sample, spec: MixtureSpec, bandwidth: float = 0.05) -> float:
    """Log-density of ``sample`` under the mixture smoothed by an isotropic Gaussian."""
    x = np.asarray(sample, dtype=np.float64)
    if x.shape != spec.shape:
        raise ValueError(f"sample shape {x.shape} != testbed shape {spec.shape}")
    d = x.size
    d2 = np.sum((x[None] - spec.means) ** 2, axis=(1, 2, 3))
    return float(logsumexp(np.log(spec.weights) - d2 / (2 * bandwidth**2)) - 0.5 * d * np.log(2 * np.pi * bandwidth**2))


def evaluate(
    sample,
    layout: Layout,
    tokens: TokenSequence,
    text_spec: MixtureSpec | None,
    attn_text: AttnMaps | None = None,
    attn_spatial: AttnMaps | None = None,
    bandwidth: float = 0.05,
    colors: dict | None = None,
) -> Metrics:
    if colors is None:
        if text_spec is None:
            raise ValueError("object colors need testbed metadata")
        colors = text_spec.colors
    boxes, flags = in_box_mass(sample, layout, colors)
    attn = {}
    maps = [a for a in (attn_text, attn_spatial) if a is not None]
    if maps:
        h, w = maps[0].resolution
        for (mask, j), box in zip(layout_masks(layout, h, w), layout.boxes):
            attn[box.name or f"token{j}"] = float(np.mean([box_ratio(a, mask, j) for a in maps]))
    realism = realism_proxy(sample, text_spec, bandwidth) if text_spec is not None else None
    return Metrics(boxes, attn, realism, flags)


# ----------------------------------------------------------------------------- rollout


def run(
    config: RunConfig,
    scene: Scene | None = None,
    record_noise: bool = False,
    record_grids: bool = False,
) -> RunResult:
    """One compositional denoising rollout.

    Steps ``t > t0`` use the spatial branch alone.  Below the threshold both
    branches are evaluated at ``z_t``, the coefficients are updated from the
    attention of both branches at the provisional ``z_{t-1}``, and the
    re-balanced noise produces the committed ``z_{t-1}``.
    """
    scene = scene or build_scene(config)
    sched, tokens, layout = scene.sched, scene.tokens, scene.layout
    H, W, _ = scene.shape
    t0 = config.threshold
    bal = config.balancer
    balancing = bal.inner_updates > 0 and not config.frozen

    z = rngmod.stream(config.seed, rngmod.STREAM_LATENT).standard_normal(scene.shape)
    coe = init_coe(H, W, rngmod.stream(config.seed, rngmod.STREAM_COE))
    noise_rng = rngmod.stream(config.seed, rngmod.STREAM_DDIM_NOISE)

    trajectory: list[StepRecord] = []
    applied, spatial_only, grids = {}, {}, []
    for t in range(sched.T, 0, -1):
        noise = noise_rng.standard_normal(scene.shape) if sched.sigma[t] > 0 else None
        try:
            if t > t0:
                eps = scene.spatial.denoise(z, t, tokens, layout).eps
                if record_noise:
                    spatial_only[t] = eps
            else:
                start = time.perf_counter()
                e_text = scene.fidelity.denoise(z, t, tokens).eps
                e_spat = scene.spatial.denoise(z, t, tokens, layout).eps
                if balancing:
                    rho_t = bal.rho_at(t, sched.T)
                    first_loss = None
                    for _ in range(bal.inner_updates):
                        grad = coe_gradient(
                            z, t, coe, scene.fidelity, scene.spatial, tokens, layout, sched, bal,
                            eps_text=e_text, eps_spatial=e_spat, noise=noise,
                        )
                        first_loss = grad.loss if first_loss is None else first_loss
                        coe = update_coe(coe, grad, rho_t)
                    xi = softmax_xi(coe)
                    g_text, g_spat = grad.norms
                    trajectory.append(
                        StepRecord(
                            t=t,
                            loss=float(first_loss),
                            grad_norm_text=g_text,
                            grad_norm_spatial=g_spat,
                            mean_xi_text=float(xi.text.mean()),
                            xi_sum_error=xi.normalization_error(),
                            wall_time=time.perf_counter() - start,
                        )
                    )
                    if record_grids:
                        grids.append({"t": t, "coe_text": coe.text, "coe_spatial": coe.spatial,
                                      "grad_text": grad.text, "grad_spatial": grad.spatial})
                else:
                    xi = softmax_xi(coe)
                eps = balance_noise(xi, e_text, e_spat)
            if record_noise:
                applied[t] = eps
            z = ddim_step(z, eps, t, sched, noise)
        except (FloatingPointError, ValueError) as exc:
            raise RolloutError(f"step t={t}: {exc}", {"t": t, "seed": config.seed}) from exc
        if not np.all(np.isfinite(z)):
            bad = np.argwhere(~np.isfinite(z))[:5].tolist()
            raise RolloutError(f"non-finite latent after step t={t}", {"t": t, "seed": config.seed, "cells": bad})

    a_text = scene.fidelity.denoise(z, 1, tokens).attn
    a_spat = scene.spatial.denoise(z, 1, tokens, layout).attn
    colors = scene.text_spec.colors
    metrics = evaluate(z, layout, tokens, scene.text_spec, a_text, a_spat, config.realism_bandwidth, colors)
    return RunResult(z, metrics, trajectory, a_text, a_spat, applied, spatial_only, grids)


# ----------------------------------------------------------------------------- experiments


def sweep_beta(config: RunConfig, betas, seeds) -> list[dict]:
    """Pure spatial-branch rollouts with the layout gate at each ``beta``.

    Returns one row per beta with seed-averaged in-box mass and realism proxy.
    """
    seeds = list(seeds)
    rows = []
    for beta in betas:
        gate = GateConfig(float(beta), config.gate.cutoff_step)
        scene = build_scene(config, gate=gate)
        cfg = dataclasses.replace(config, t0=0, gate=gate)
        boxes, real = [], []
        for s in seeds:
            res = run(dataclasses.replace(cfg, seed=s), scene)
            boxes.append(res.metrics.mean_in_box_mass)
            real.append(res.metrics.realism_proxy)
        rows.append(
            {
                "beta": float(beta),
                "in_box_mass": float(np.mean(boxes)),
                "realism_proxy": float(np.mean(real)),
                "in_box_mass_per_seed": boxes,
                "realism_proxy_per_seed": real,
            }
        )
    return rows


def sweep_spearman(rows) -> float:
    return float(spearmanr([r["beta"] for r in rows], [r["in_box_mass"] for r in rows]).statistic)


def ablate(config: RunConfig, seeds, keep_samples: bool = False) -> dict:
    """Paired rollouts with the dynamic balancer and with influences frozen at 0.5.

    With ``keep_samples`` the result also holds ``samples``: one
    ``(seed, dynamic, frozen)`` triple of final latents per seed.
    """
    scene = build_scene(config)
    rows, samples = [], []
    for s in seeds:
        dyn = run(dataclasses.replace(config, seed=s, frozen=False), scene)
        frz = run(dataclasses.replace(config, seed=s, frozen=True), scene)
        rows.append(
            {
                "seed": s,
                "dynamic": dyn.metrics.to_json(),
                "frozen": frz.metrics.to_json(),
                "dynamic_trajectory_len": len(dyn.trajectory),
                "frozen_trajectory_len": len(frz.trajectory),
            }
        )
        if keep_samples:
            samples.append((s, dyn.sample, frz.sample))
    keys = ("mean_attn_in_box", "mean_in_box_mass", "realism_proxy")
    summary = {}
    for k in keys:
        d = float(np.mean([r["dynamic"][k] for r in rows]))
        f = float(np.mean([r["frozen"][k] for r in rows]))
        summary[k] = {"dynamic": d, "frozen": f, "delta": d - f}
    out = {"rows": rows, "summary": summary}
    if keep_samples:
        out["samples"] = samples
    return out
