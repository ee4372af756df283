"""Toy H&E stand-ins used for smoke training and desk-scale experiments.

``colorize_render`` turns a mask render into a crude hematoxylin/eosin-like
patch: purple nuclei on pink stroma with smooth texture and pixel noise.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from .imaging import write_labels, write_rgb
from .mask_synth import SamplerParams, disk_dictionary, render_mask_image, sample_mask

NUCLEUS_RGB = np.array([92.0, 58.0, 150.0])
STROMA_RGB = np.array([236.0, 182.0, 212.0])


def colorize_render(render: np.ndarray, seed: int, noise_std: float = 8.0, texture_std: float = 10.0) -> np.ndarray:
    """uint8 RGB patch for a render (255 nucleus, 128 seam, 0 background).

    Seam pixels get a half-tone between nucleus and stroma colors.
    """
    r = np.asarray(render)
    if r.ndim == 3:
        r = r[..., 0]
    rng = np.random.default_rng(seed)
    alpha = (r.astype(np.float64) / 255.0)[..., None]
    base = alpha * NUCLEUS_RGB + (1.0 - alpha) * STROMA_RGB
    texture = ndimage.gaussian_filter(rng.normal(size=r.shape), 2.0)
    texture *= texture_std / max(float(texture.std()), 1e-12)
    img = base + texture[..., None] + rng.normal(scale=noise_std, size=base.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def make_toy_tiles(
    out: str | Path,
    layout: dict[str, list[str]],
    tiles_per_patient: int = 1,
    size: int = 300,
    target_count: int = 60,
    seed: int = 0,
) -> list[str]:
    """Write a labeled tile directory of colorized synthetic nuclei.

    ``layout`` maps organ -> patient ids. Produces ``images/``, ``labels/``
    and ``meta.csv`` in the layout read by patch extraction; returns tile ids.
    """
    out = Path(out)
    dictionary = disk_dictionary([5.0, 6.0, 7.0, 8.0])
    params = SamplerParams(canvas=(size, size), target_count=target_count)
    rows, ids, k = ["id,organ,patient"], [], 0
    for organ in sorted(layout):
        for patient in layout[organ]:
            for t in range(tiles_per_patient):
                tid = f"{organ}_{patient}_{t}"
                pair = sample_mask(dictionary, params, seed * 100_003 + k)
                write_rgb(out / "images" / f"{tid}.png", colorize_render(render_mask_image(pair), seed * 100_003 + k))
                write_labels(out / "labels" / f"{tid}.png", pair.instances)
                rows.append(f"{tid},{organ},{patient}")
                ids.append(tid)
                k += 1
    (out / "meta.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return ids
