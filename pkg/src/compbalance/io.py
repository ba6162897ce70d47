"""File outputs: PNG images and heatmaps, raw tensors, JSON-lines, CSV grids."""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

__all__ = [
    "save_sample_png",
    "save_heatmap_png",
    "save_attention_pngs",
    "save_raw",
    "load_raw",
    "array_hash",
    "write_jsonl",
    "read_jsonl",
    "write_grid_csv",
    "write_json",
    "plot_grad_norms",
]


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def save_sample_png(sample, path, lo: float = 0.0, hi: float = 1.0) -> None:
    """Affinely map ``[lo, hi]`` to ``[0, 1]``, clamp per channel, save as PNG."""
    from PIL import Image

    img = (np.asarray(sample, dtype=np.float64) - lo) / (hi - lo)
    if img.ndim == 3 and img.shape[-1] == 1:
        img = img[..., 0]
    if img.ndim == 3 and img.shape[-1] not in (3, 4):
        img = img[..., :3] if img.shape[-1] > 3 else np.concatenate([img, np.zeros(img.shape[:2] + (3 - img.shape[-1],))], -1)
    Image.fromarray(_to_uint8(img)).save(path)


def save_heatmap_png(grid, path) -> None:
    """Grayscale heatmap, min-max normalized (constant grids map to mid-gray)."""
    from PIL import Image

    g = np.asarray(grid, dtype=np.float64)
    span = g.max() - g.min()
    norm = (g - g.min()) / span if span > 0 else np.full_like(g, 0.5)
    Image.fromarray(_to_uint8(norm), mode="L").save(path)


def save_attention_pngs(maps: np.ndarray, tokens, directory, prefix: str = "attn") -> list[Path]:
    """One grayscale PNG per token; attention values in ``[0, 1]`` are written unscaled."""
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for j, tok in enumerate(tokens):
        safe = "".join(ch if ch.isalnum() else "_" for ch in tok)
        p = directory / f"{prefix}_{j:02d}_{safe}.png"
        Image.fromarray(_to_uint8(maps[:, :, j]), mode="L").save(p)
        paths.append(p)
    return paths


def save_raw(arr, path) -> None:
    np.save(path, np.ascontiguousarray(arr, dtype="<f8"), allow_pickle=False)


def load_raw(path) -> np.ndarray:
    return np.load(path, allow_pickle=False)


def array_hash(arr) -> str:
    a = np.ascontiguousarray(arr, dtype="<f8")
    return hashlib.sha256(str(a.shape).encode() + a.tobytes()).hexdigest()


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_jsonl(records, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_grid_csv(grid, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in np.asarray(grid):
            w.writerow([repr(float(v)) for v in row])


def plot_grad_norms(records, path, size=(480, 240)) -> None:
    """Line chart of per-branch gradient norms against step, log-scaled.

    Steps are drawn right to left as sampling proceeds (high ``t`` first).
    Raises ``ValueError`` on a missing step or a non-finite norm.
    """
    from PIL import Image, ImageDraw

    recs = sorted(records, key=lambda r: -r["t"])
    ts = [r["t"] for r in recs]
    if not ts or any(a - b != 1 for a, b in zip(ts, ts[1:])):
        raise ValueError("trajectory steps are not contiguous")
    series = {"grad_norm_text": (200, 40, 40), "grad_norm_spatial": (40, 80, 200)}
    vals = np.array([[r[k] for k in series] for r in recs], dtype=np.float64)
    if not np.all(np.isfinite(vals)):
        raise ValueError("non-finite gradient norm in trajectory")
    logv = np.log10(np.maximum(vals, 1e-300))
    finite = logv[vals > 0]
    lo, hi = (finite.min(), finite.max()) if finite.size else (-1.0, 0.0)
    if hi - lo < 1e-9:
        lo, hi = lo - 0.5, hi + 0.5
    logv = np.clip(logv, lo, hi)
    w, h = size
    pad = 20
    img = Image.new("RGB", size, "white")
    draw = ImageDraw.Draw(img)
    draw.rectangle([pad, pad, w - pad, h - pad], outline=(0, 0, 0))
    n = len(ts)
    xs = [pad + (w - 2 * pad) * (i / max(n - 1, 1)) for i in range(n)]
    for col, color in enumerate(series.values()):
        ys = [h - pad - (h - 2 * pad) * (v - lo) / (hi - lo) for v in logv[:, col]]
        if n == 1:
            draw.ellipse([xs[0] - 2, ys[0] - 2, xs[0] + 2, ys[0] + 2], fill=color)
        else:
            draw.line(list(zip(xs, ys)), fill=color, width=2)
    img.save(path)
