"""Spatial conditions (layouts, keypoints, segmentation maps) and their masks.

Coordinates are normalized to ``[0, 1]`` with ``x`` along columns and ``y``
along rows; boxes are ``(x0, y0, x1, y1)`` with the top-left corner first.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Box",
    "Layout",
    "KeypointSet",
    "SegmentationMap",
    "rasterize",
    "layout_masks",
    "mask_extent",
    "transfer",
    "load_layout",
    "save_layout",
    "load_keypoints",
    "read_segmentation_pgm",
    "write_segmentation_pgm",
    "DEFAULT_PAD",
]

DEFAULT_PAD = 0.05


@dataclass(frozen=True)
class Box:
    x0: float
    y0: float
    x1: float
    y1: float
    token_index: int
    name: str = ""

    def __post_init__(self):
        for name in ("x0", "y0", "x1", "y1"):
            object.__setattr__(self, name, float(getattr(self, name)))
        coords = (self.x0, self.y0, self.x1, self.y1)
        if not all(np.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if not all(0.0 <= c <= 1.0 for c in coords):
            raise ValueError(f"box coordinates must be normalized to [0, 1], got {coords}")
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box {coords}: need x0 < x1 and y0 < y1")
        if int(self.token_index) != self.token_index or self.token_index < 0:
            raise ValueError(f"invalid token index {self.token_index!r}")

    @property
    def coords(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))

    def contains(self, x: float, y: float) -> bool:
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1


@dataclass(frozen=True)
class Layout:
    boxes: tuple[Box, ...]

    def __post_init__(self):
        boxes = tuple(self.boxes)
        if not boxes:
            raise ValueError("a layout needs at least one box")
        idx = [b.token_index for b in boxes]
        if len(set(idx)) != len(idx):
            raise ValueError(f"token indices must be distinct, got {idx}")
        object.__setattr__(self, "boxes", boxes)

    def __len__(self) -> int:
        return len(self.boxes)

    def __iter__(self):
        return iter(self.boxes)

    @property
    def token_indices(self) -> list[int]:
        return [b.token_index for b in self.boxes]

    def validate_tokens(self, n_tokens: int) -> None:
        for b in self.boxes:
            if not 1 <= b.token_index < n_tokens:
                raise ValueError(
                    f"box {b.name or b.coords} is bound to token {b.token_index}, "
                    f"outside the object range 1..{n_tokens - 1}"
                )

    def to_json(self) -> list[dict]:
        return [
            {"object": b.name, "token": b.token_index, "box": [b.x0, b.y0, b.x1, b.y1]}
            for b in self.boxes
        ]


@dataclass(frozen=True)
class KeypointSet:
    """Keypoint groups, one per object token."""

    groups: tuple[tuple[int, tuple[tuple[float, float], ...]], ...]

    def __post_init__(self):
        groups = tuple((int(tok), tuple((float(x), float(y)) for x, y in pts)) for tok, pts in self.groups)
        if not groups:
            raise ValueError("keypoint set is empty")
        for tok, pts in groups:
            if not pts:
                raise ValueError(f"keypoint group for token {tok} is empty")
            arr = np.asarray(pts)
            if np.any(arr < 0) or np.any(arr > 1) or not np.all(np.isfinite(arr)):
                raise ValueError(f"keypoints for token {tok} must lie in [0, 1]^2")
        object.__setattr__(self, "groups", groups)


@dataclass(frozen=True, eq=False)
class SegmentationMap:
    """Label grid of token indices; 0 is background."""

    labels: np.ndarray = field(repr=False)

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2 or lab.size == 0:
            raise ValueError("segmentation map must be a non-empty 2-D grid")
        if not np.issubdtype(lab.dtype, np.integer):
            if not np.all(lab == np.round(lab)):
                raise ValueError("segmentation labels must be integers")
            lab = lab.astype(np.int64)
        if np.any(lab < 0):
            raise ValueError("segmentation labels must be non-negative")
        lab = lab.copy()
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)

    @property
    def present_labels(self) -> list[int]:
        return [int(v) for v in np.unique(self.labels) if v != 0]


def _cell_centers(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    ys = (np.arange(height) + 0.5) / height
    xs = (np.arange(width) + 0.5) / width
    return ys, xs


def rasterize(box: Box, height: int, width: int) -> np.ndarray:
    """Binary ``height x width`` mask of cells whose centers lie in ``box``.

    An axis along which the box covers no cell center is snapped to the row
    (or column) containing the box center; a warning is issued when that
    happens, so every mask has at least one cell.
    """
    if height < 1 or width < 1:
        raise ValueError(f"mask size must be positive, got {height}x{width}")
    ys, xs = _cell_centers(height, width)
    rows = (ys >= box.y0) & (ys <= box.y1)
    cols = (xs >= box.x0) & (xs <= box.x1)
    cx, cy = box.center
    if not rows.any():
        rows[min(int(cy * height), height - 1)] = True
    if not cols.any():
        cols[min(int(cx * width), width - 1)] = True
    mask = (rows[:, None] & cols[None, :]).astype(np.float64)
    if mask.sum() != np.sum((ys >= box.y0) & (ys <= box.y1)) * np.sum((xs >= box.x0) & (xs <= box.x1)):
        r, c = np.flatnonzero(rows), np.flatnonzero(cols)
        warnings.warn(
            f"box {box.coords} covers no cell center at {height}x{width}; "
            f"snapped to rows {r.min()}-{r.max()}, cols {c.min()}-{c.max()}",
            stacklevel=2,
        )
    return mask


def layout_masks(layout: Layout, height: int, width: int) -> list[tuple[np.ndarray, int]]:
    """``(mask, token_index)`` pairs for every box of ``layout``."""
    return [(rasterize(b, height, width), b.token_index) for b in layout.boxes]


def mask_extent(mask: np.ndarray, token_index: int = 1) -> Box:
    """Tightest box (in cell edges) around the ones of a binary mask."""
    mask = np.asarray(mask)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("mask has no ones")
    h, w = mask.shape
    return Box(cols[0] / w, rows[0] / h, (cols[-1] + 1) / w, (rows[-1] + 1) / h, token_index)


def _padded(lo: float, hi: float, pad: float) -> tuple[float, float]:
    if hi - lo > 0:
        return lo, hi
    return max(lo - pad, 0.0), min(hi + pad, 1.0)


def transfer(
    cond: KeypointSet | SegmentationMap,
    pad: float = DEFAULT_PAD,
    labels: Iterable[int] | None = None,
    names: dict[int, str] | None = None,
) -> Layout:
    """Map keypoint groups or segments to their axis-aligned extent boxes.

    Zero-width or zero-height extents are widened by ``pad`` on each side.
    For segmentation maps, ``labels`` selects which segments to convert
    (default: every non-zero label present).
    """
    names = names or {}
    boxes = []
    if isinstance(cond, KeypointSet):
        for tok, pts in cond.groups:
            arr = np.asarray(pts, dtype=np.float64)
            x0, x1 = _padded(arr[:, 0].min(), arr[:, 0].max(), pad)
            y0, y1 = _padded(arr[:, 1].min(), arr[:, 1].max(), pad)
            boxes.append(Box(x0, y0, x1, y1, tok, names.get(tok, "")))
    elif isinstance(cond, SegmentationMap):
        lab = cond.labels
        h, w = lab.shape
        wanted = cond.present_labels if labels is None else [int(v) for v in labels]
        if not wanted:
            raise ValueError("segmentation map has no labelled segment")
        for tok in wanted:
            rows, cols = np.nonzero(lab == tok)
            if rows.size == 0:
                raise ValueError(f"segment label {tok} is absent from the map")
            boxes.append(
                Box(cols.min() / w, rows.min() / h, (cols.max() + 1) / w, (rows.max() + 1) / h, tok, names.get(tok, ""))
            )
    else:
        raise TypeError(f"cannot transfer condition of type {type(cond).__name__}")
    return Layout(tuple(boxes))


def _resolve_token(entry: dict, token_lookup) -> int:
    if "token" in entry and entry["token"] is not None:
        return int(entry["token"])
    if token_lookup is None:
        raise ValueError(f"entry {entry!r} has no token index and no token sequence was given")
    return token_lookup(entry["object"])


def layout_from_json(data: Sequence[dict], token_lookup=None) -> Layout:
    """Build a layout from ``[{"object": str, "box": [x0, y0, x1, y1]}, ...]``.

    ``token_lookup`` maps object strings to token indices when entries carry no
    explicit ``"token"`` field.
    """
    if not isinstance(data, (list, tuple)):
        raise ValueError("layout JSON must be a list of objects")
    boxes = []
    for entry in data:
        x0, y0, x1, y1 = (float(v) for v in entry["box"])
        boxes.append(Box(x0, y0, x1, y1, _resolve_token(entry, token_lookup), str(entry.get("object", ""))))
    return Layout(tuple(boxes))


def load_layout(path, token_lookup=None) -> Layout:
    return layout_from_json(json.loads(Path(path).read_text()), token_lookup)


def save_layout(layout: Layout, path) -> None:
    Path(path).write_text(json.dumps(layout.to_json(), indent=2) + "\n")


def load_keypoints(path, token_lookup=None) -> KeypointSet:
    """Keypoints JSON: ``[{"object": str, "points": [[x, y], ...]}, ...]``."""
    data = json.loads(Path(path).read_text())
    return KeypointSet(tuple((_resolve_token(g, token_lookup), tuple(map(tuple, g["points"]))) for g in data))


def read_segmentation_pgm(path) -> SegmentationMap:
    from PIL import Image

    with Image.open(path) as im:
        return SegmentationMap(np.asarray(im).astype(np.int64))


def write_segmentation_pgm(seg: SegmentationMap, path) -> None:
    from PIL import Image

    lab = seg.labels
    if lab.max() > 255:
        Image.fromarray(lab.astype(np.uint16)).save(path, format="PPM")
    else:
        Image.fromarray(lab.astype(np.uint8), mode="L").save(path, format="PPM")
