"""Blobworld: an analytic image testbed built from finite mixtures of scenes.

Each mixture component is a rendered scene in which every object token sits
at one anchor of a regular grid as a colored, truncated Gaussian blob.  The
data distribution is the uniform (or weighted) mixture of point masses on
those scene images, so diffusion marginals and scores are available in
closed form.
"""

from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conditions import Box, Layout, rasterize

__all__ = [
    "MixtureSpec",
    "Placement",
    "build_text_mixture",
    "restrict_to_layout",
    "object_colors",
    "anchor_grid",
    "load_mixture",
    "save_mixture",
    "COLOR_WORDS",
]

COLOR_WORDS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "magenta": (1.0, 0.0, 1.0),
    "purple": (0.6, 0.0, 1.0),
    "cyan": (0.0, 1.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
    "white": (1.0, 1.0, 1.0),
}
_PALETTE = ("red", "blue", "green", "yellow", "magenta", "cyan")

MIXTURE_FORMAT_VERSION = 1

# component -> {token index: (x, y) normalized anchor}
Placement = dict


def anchor_grid(per_side: int = 4) -> list[tuple[float, float]]:
    """Normalized anchor centers, row-major from the top-left."""
    ticks = (np.arange(per_side) + 0.5) / per_side
    return [(float(x), float(y)) for y in ticks for x in ticks]


def object_colors(tokens, channels: int = 3) -> dict[int, np.ndarray]:
    """Color per object token: the color word right before it, else a palette slot."""
    colors = {}
    for k, j in enumerate(tokens.object_token_indices):
        prev = tokens.tokens[j - 1] if j > 1 else ""
        if channels == 3:
            rgb = COLOR_WORDS.get(prev, COLOR_WORDS[_PALETTE[k % len(_PALETTE)]])
            colors[j] = np.asarray(rgb, dtype=np.float64)
        else:
            vec = np.zeros(channels)
            vec[k % channels] = 1.0
            colors[j] = vec
    return colors


def _sq_dist(height: int, width: int, anchor: tuple[float, float]) -> np.ndarray:
    cy = anchor[1] * height - 0.5
    cx = anchor[0] * width - 0.5
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    return (rows - cy) ** 2 + (cols - cx) ** 2


@dataclass(frozen=True, eq=False)
class MixtureSpec:
    """Weighted point-mass mixture over rendered blobworld scenes.

    ``means`` is ``(K, H, W, C)``; ``profiles`` is ``(K, H, W, N)`` and holds,
    per component, the attention distribution over the ``N`` prompt tokens
    that an ideal denoiser settled on that scene would produce.
    """

    height: int
    width: int
    channels: int
    n_tokens: int
    object_tokens: tuple[int, ...]
    colors: dict
    placements: tuple
    weights: np.ndarray
    radius: float = 2.5
    attn_peak: float = 0.9
    imprints: tuple = ()
    means: np.ndarray = field(init=False, repr=False)
    profiles: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size != len(self.placements) or w.size == 0:
            raise ValueError("need one positive weight per component")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must be positive and sum to 1 (sum={w.sum()!r})")
        objs = tuple(int(j) for j in self.object_tokens)
        for p in self.placements:
            if sorted(p) != sorted(objs):
                raise ValueError(f"component {p} must place every object token {objs} exactly once")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "object_tokens", objs)
        object.__setattr__(self, "colors", {int(k): np.asarray(v, dtype=np.float64) for k, v in self.colors.items()})
        means, profiles = self._render()
        means.setflags(write=False)
        profiles.setflags(write=False)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "profiles", profiles)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    def __len__(self) -> int:
        return self.weights.size

    def _render(self):
        H, W, C, N = self.height, self.width, self.channels, self.n_tokens
        K = len(self.placements)
        sig2 = (self.radius / 2.0) ** 2
        means = np.zeros((K, H, W, C))
        profiles = np.zeros((K, H, W, N))
        imprint = np.zeros((H, W, C))
        for entry in self.imprints:
            box = Box(*entry["box"], token_index=entry["token"])
            imprint += entry["strength"] * rasterize(box, H, W)[:, :, None] * self.colors[entry["token"]]
        for k, placement in enumerate(self.placements):
            bumps = {}
            for j, anchor in placement.items():
                d2 = _sq_dist(H, W, anchor)
                blob = np.exp(-d2 / (2 * sig2)) * (d2 <= self.radius**2)
                means[k] += blob[:, :, None] * self.colors[j]
                bumps[j] = np.exp(-d2 / (2 * sig2))
            total = np.maximum(1.0, sum(bumps.values()))
            for j, b in bumps.items():
                profiles[k, :, :, j] = self.attn_peak * b / total
            profiles[k, :, :, 0] = 1.0 - profiles[k].sum(axis=-1)
            means[k] += imprint
        return means, profiles

    def to_json(self) -> dict:
        return {
            "version": MIXTURE_FORMAT_VERSION,
            "height": self.height,
            "width": self.width,
            "channels": self.channels,
            "n_tokens": self.n_tokens,
            "radius": self.radius,
            "attn_peak": self.attn_peak,
            "object_tokens": list(self.object_tokens),
            "colors": {str(j): c.tolist() for j, c in self.colors.items()},
            "imprints": [dict(e, box=list(e["box"])) for e in self.imprints],
            "components": [
                {"weight": float(w), "placement": {str(j): list(a) for j, a in p.items()}}
                for w, p in zip(self.weights, self.placements)
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> "MixtureSpec":
        if data.get("version") != MIXTURE_FORMAT_VERSION:
            raise ValueError(f"unsupported mixture file version {data.get('version')!r}")
        comps = data["components"]
        return cls(
            height=data["height"],
            width=data["width"],
            channels=data["channels"],
            n_tokens=data["n_tokens"],
            object_tokens=tuple(data["object_tokens"]),
            colors={int(j): c for j, c in data["colors"].items()},
            placements=tuple({int(j): tuple(a) for j, a in c["placement"].items()} for c in comps),
            weights=np.array([c["weight"] for c in comps]),
            radius=data["radius"],
            attn_peak=data["attn_peak"],
            imprints=tuple(dict(e, box=tuple(e["box"])) for e in data["imprints"]),
        )


def save_mixture(spec: MixtureSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_json(), indent=1) + "\n")


def load_mixture(path) -> MixtureSpec:
    return MixtureSpec.from_json(json.loads(Path(path).read_text()))


def build_text_mixture(
    tokens,
    height: int = 16,
    width: int = 16,
    channels: int = 3,
    radius: float = 2.5,
    anchors_per_side: int = 4,
    max_objects: int = 2,
) -> MixtureSpec:
    """Uniform mixture over every placement of the object tokens on distinct anchors."""
    objs = tuple(tokens.object_token_indices)
    if not objs:
        raise ValueError("the prompt has no object tokens")
    if len(objs) > max_objects:
        raise ValueError(f"{len(objs)} objects exceed the testbed limit of {max_objects}")
    if not 1 <= height <= 64 or not 1 <= width <= 64:
        raise ValueError("testbed resolution must be between 1 and 64")
    anchors = anchor_grid(anchors_per_side)
    placements = tuple(dict(zip(objs, combo)) for combo in itertools.permutations(anchors, len(objs)))
    return MixtureSpec(
        height=height,
        width=width,
        channels=channels,
        n_tokens=len(tokens),
        object_tokens=objs,
        colors=object_colors(tokens, channels),
        placements=placements,
        weights=np.full(len(placements), 1.0 / len(placements)),
        radius=radius,
    )


def restrict_to_layout(spec: MixtureSpec, layout: Layout, box_imprint: float = 0.0) -> MixtureSpec:
    """Keep the components whose object anchors lie inside the layout boxes.

    An object whose box contains no anchor falls back to the anchor nearest
    the box center (with a warning).  ``box_imprint`` paints each box faintly
    in its object's color on every kept component, standing in for the
    texture a layout-conditioned model stamps onto its boxes.
    """
    boxes = {b.token_index: b for b in layout.boxes}
    missing = set(boxes) - set(spec.object_tokens)
    if missing:
        raise ValueError(f"layout tokens {sorted(missing)} are not objects of the mixture")
    anchors = sorted({a for p in spec.placements for a in p.values()})
    allowed = {}
    for j, box in boxes.items():
        inside = {a for a in anchors if box.contains(*a)}
        if not inside:
            cx, cy = box.center
            nearest = min(anchors, key=lambda a: (a[0] - cx) ** 2 + (a[1] - cy) ** 2)
            warnings.warn(f"no anchor inside box {box.coords} for token {j}; using nearest {nearest}", stacklevel=2)
            inside = {nearest}
        allowed[j] = inside
    keep = [k for k, p in enumerate(spec.placements) if all(p[j] in allowed[j] for j in boxes)]
    if not keep:
        def cost(p):
            return sum((p[j][0] - b.center[0]) ** 2 + (p[j][1] - b.center[1]) ** 2 for j, b in boxes.items())

        best = min(cost(p) for p in spec.placements)
        keep = [k for k, p in enumerate(spec.placements) if cost(p) <= best + 1e-12]
        warnings.warn("layout admits no joint placement; using the closest placements", stacklevel=2)
    weights = spec.weights[keep]
    imprints = tuple(
        {"token": j, "box": b.coords, "strength": float(box_imprint)} for j, b in boxes.items() if box_imprint
    )
    return MixtureSpec(
        height=spec.height,
        width=spec.width,
        channels=spec.channels,
        n_tokens=spec.n_tokens,
        object_tokens=spec.object_tokens,
        colors=spec.colors,
        placements=tuple(spec.placements[k] for k in keep),
        weights=weights / weights.sum(),
        radius=spec.radius,
        attn_peak=spec.attn_peak,
        imprints=spec.imprints + imprints,
    )
