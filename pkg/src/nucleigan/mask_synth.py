"""Nucleus shape dictionary and randomized polygon mask sampling."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage
from skimage.draw import polygon as draw_polygon
from skimage.measure import regionprops

logger = logging.getLogger(__name__)

SEAM_VALUE = 128
PROFILE_MIN, PROFILE_MAX = 0.05, 1.5
_RAY_STEP = 0.25


class EmptyDictionaryError(ValueError):
    pass


@dataclass
class ShapeEntry:
    equivalent_radius: float
    radial_profile: np.ndarray
    source_organ: str = "unknown"


@dataclass
class ShapeDictionary:
    entries: list[ShapeEntry]
    K: int = 16

    def __len__(self) -> int:
        return len(self.entries)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    def to_text(self) -> str:
        return "".join(
            json.dumps(
                {
                    "equivalent_radius": float(e.equivalent_radius),
                    "radial_profile": [float(v) for v in e.radial_profile],
                    "source_organ": e.source_organ,
                }
            )
            + "\n"
            for e in self.entries
        )

    @classmethod
    def from_text(cls, text: str) -> "ShapeDictionary":
        entries = []
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            entries.append(
                ShapeEntry(
                    float(rec["equivalent_radius"]),
                    np.asarray(rec["radial_profile"], dtype=np.float64),
                    rec.get("source_organ", "unknown"),
                )
            )
        if not entries:
            raise EmptyDictionaryError("shape dictionary file has no entries")
        return cls(entries, len(entries[0].radial_profile))

    @classmethod
    def load(cls, path: str | Path) -> "ShapeDictionary":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


@dataclass
class SamplerParams:
    canvas: tuple[int, int] = (256, 256)
    target_count: int = 40
    size_jitter: float = 0.3
    shape_jitter: float = 0.25
    clump_fraction: float = 0.2
    max_overlap: float = 0.2
    placement_grid_cells: int = 64

    def __post_init__(self) -> None:
        self.canvas = (int(self.canvas[0]), int(self.canvas[1]))
        if self.canvas[0] < 64 or self.canvas[1] < 64:
            raise ValueError(f"canvas must be at least 64x64, got {self.canvas}")
        if self.target_count < 0:
            raise ValueError("target_count must be nonnegative")
        for name in ("size_jitter", "shape_jitter", "clump_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not 0.0 <= self.max_overlap < 0.5:
            raise ValueError(f"max_overlap must lie in [0, 0.5), got {self.max_overlap}")
        if self.placement_grid_cells < 1:
            raise ValueError("placement_grid_cells must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["canvas"] = list(self.canvas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerParams":
        d = dict(d)
        if "canvas" in d:
            c = d["canvas"]
            d["canvas"] = (c, c) if isinstance(c, int) else tuple(c)
        return cls(**d)


@dataclass
class SynthMaskPair:
    render: np.ndarray  # (H, W) bool
    instances: np.ndarray  # (H, W) int32
    seed: int
    params: SamplerParams
    complete: bool = True
    radii: list[float] = field(default_factory=list)
    overlap_pairs: list[tuple[int, int]] = field(default_factory=list)

    @property
    def count(self) -> int:
        return int(self.instances.max(initial=0))


def _boundary_distance(region: np.ndarray, cy: float, cx: float, theta: float) -> float:
    h, w = region.shape
    dy, dx = math.sin(theta), math.cos(theta)
    max_d = math.hypot(h, w)
    last_inside = -1.0
    d = 0.0
    while d <= max_d:
        r = int(math.floor(cy + d * dy + 0.5))
        c = int(math.floor(cx + d * dx + 0.5))
        if 0 <= r < h and 0 <= c < w and region[r, c]:
            last_inside = d
        d += _RAY_STEP
    if last_inside < 0:
        return 0.0
    # last sample inside lies within half a step of the pixel edge
    return last_inside + _RAY_STEP


def build_shape_dictionary(
    maps: Sequence[np.ndarray],
    profile_resolution: int = 16,
    organs: Sequence[str] | None = None,
) -> ShapeDictionary:
    """Collect size and radial-shape statistics of every interior instance.

    Instances whose bounding box touches the image border are skipped since
    their outline is cut.
    """
    K = int(profile_resolution)
    angles = 2 * np.pi * np.arange(K) / K
    entries: list[ShapeEntry] = []
    for i, labels in enumerate(maps):
        labels = np.asarray(labels)
        organ = organs[i] if organs is not None else "unknown"
        H, W = labels.shape
        for rp in regionprops(labels.astype(np.int64)):
            r0, c0, r1, c1 = rp.bbox
            if r0 == 0 or c0 == 0 or r1 == H or c1 == W:
                continue
            region = rp.image
            cy, cx = rp.centroid_local
            eq_r = math.sqrt(rp.area / math.pi)
            prof = np.array([_boundary_distance(region, cy, cx, t) for t in angles]) / eq_r
            entries.append(ShapeEntry(eq_r, np.clip(prof, PROFILE_MIN, PROFILE_MAX), organ))
    if not entries:
        raise EmptyDictionaryError("no interior instances found; shape dictionary is empty")
    return ShapeDictionary(entries, K)


def disk_dictionary(radii: Iterable[float], K: int = 16, organ: str = "synthetic") -> ShapeDictionary:
    """Dictionary of perfectly round shapes, handy for toy problems."""
    return ShapeDictionary([ShapeEntry(float(r), np.ones(K), organ) for r in radii], K)


def _grid_centers(params: SamplerParams) -> tuple[np.ndarray, float, float]:
    H, W = params.canvas
    n = params.placement_grid_cells
    rows = max(1, int(math.floor(math.sqrt(n * H / W))))
    cols = max(1, int(math.ceil(n / rows)))
    ch, cw = H / rows, W / cols
    rr, cc = np.meshgrid((np.arange(rows) + 0.5) * ch, (np.arange(cols) + 0.5) * cw, indexing="ij")
    centers = np.stack([rr.ravel(), cc.ravel()], axis=1)[:n]
    return centers, ch, cw


class _Nucleus:
    __slots__ = ("radius", "vertex_radii", "angles")

    def __init__(self, entry: ShapeEntry, params: SamplerParams, rng: np.random.Generator):
        K = len(entry.radial_profile)
        self.radius = max(2.0, entry.equivalent_radius * (1 + params.size_jitter * rng.uniform(-1, 1)))
        perturb = 1 + params.shape_jitter * rng.uniform(-1, 1, size=K)
        self.vertex_radii = self.radius * entry.radial_profile * perturb
        rot = rng.uniform(0, 2 * np.pi)
        self.angles = rot + 2 * np.pi * np.arange(K) / K

    @property
    def reach(self) -> float:
        return float(self.vertex_radii.max())

    def footprint(self, cy: float, cx: float, shape: tuple[int, int]):
        """Raster pixels of the polygon, or None when it leaves the canvas."""
        vr = cy + self.vertex_radii * np.sin(self.angles)
        vc = cx + self.vertex_radii * np.cos(self.angles)
        if vr.min() < 0 or vc.min() < 0 or vr.max() > shape[0] - 1 or vc.max() > shape[1] - 1:
            return None
        rr, cc = draw_polygon(vr, vc, shape)
        if rr.size == 0:
            return None
        return rr, cc


def _touches_any(instances: np.ndarray, rr: np.ndarray, cc: np.ndarray) -> bool:
    H, W = instances.shape
    r0, r1 = max(rr.min() - 1, 0), min(rr.max() + 2, H)
    c0, c1 = max(cc.min() - 1, 0), min(cc.max() + 2, W)
    local = np.zeros((r1 - r0, c1 - c0), bool)
    local[rr - r0, cc - c0] = True
    grown = ndimage.binary_dilation(local, structure=np.ones((3, 3), bool))
    return bool(np.any(instances[r0:r1, c0:c1][grown] > 0))


def sample_mask(dictionary: ShapeDictionary, params: SamplerParams, seed: int) -> SynthMaskPair:
    """Sample a random nuclei instance map and its binary render.

    Isolated nuclei go to jittered grid cells and never touch each other;
    a ``clump_fraction`` share is pushed against an already placed nucleus
    until the two overlap (by at most ``max_overlap`` of the smaller one, or
    just touch when ``max_overlap`` is 0). Contested pixels belong to the
    later nucleus.
    """
    if len(dictionary) == 0:
        raise EmptyDictionaryError("cannot sample from an empty shape dictionary")
    rng = np.random.default_rng(seed)
    H, W = params.canvas
    instances = np.zeros((H, W), np.int32)
    n = params.target_count
    n_clump = int(round(params.clump_fraction * n))
    n_single = n - n_clump
    if n > 0 and n_single == 0:
        n_single, n_clump = 1, n - 1

    radii: list[float] = []
    full_area: list[int] = []
    overlap_pairs: list[tuple[int, int]] = []
    budget = 10 * n
    attempts = 0

    centers, ch, cw = _grid_centers(params)
    order: list[int] = []

    def next_cell() -> np.ndarray:
        if not order:
            order.extend(rng.permutation(len(centers)).tolist())
        return centers[order.pop()]

    def place(rr, cc, nucleus: _Nucleus) -> int:
        label = len(radii) + 1
        instances[rr, cc] = label
        radii.append(nucleus.radius)
        full_area.append(int(rr.size))
        return label

    placed_single = 0
    while placed_single < n_single and attempts < budget:
        attempts += 1
        nucleus = _Nucleus(dictionary.entries[rng.integers(len(dictionary))], params, rng)
        cy, cx = next_cell() + rng.uniform(-0.5, 0.5, size=2) * (ch, cw)
        fp = nucleus.footprint(cy, cx, (H, W))
        if fp is None or _touches_any(instances, *fp):
            continue
        place(*fp, nucleus)
        placed_single += 1

    placed_clump = 0
    while placed_clump < n_clump and attempts < budget and radii:
        attempts += 1
        anchor = int(rng.integers(len(radii))) + 1
        nucleus = _Nucleus(dictionary.entries[rng.integers(len(dictionary))], params, rng)
        ys, xs = np.nonzero(instances == anchor)
        ay, ax = ys.mean(), xs.mean()
        anchor_reach = math.hypot(ys.max() - ys.min() + 1, xs.max() - xs.min() + 1) / 2
        theta = rng.uniform(0, 2 * np.pi)
        d = anchor_reach + nucleus.reach + 2.0
        accepted = None
        while d > 0:
            cy, cx = ay + d * math.sin(theta), ax + d * math.cos(theta)
            fp = nucleus.footprint(cy, cx, (H, W))
            d -= 0.5
            if fp is None:
                continue
            hit = instances[fp]
            if params.max_overlap == 0:
                if np.any(hit > 0):
                    break
                local = np.zeros((H, W), bool)
                local[fp] = True
                ring = ndimage.binary_dilation(local, structure=np.ones((3, 3), bool)) & ~local
                if np.any(instances[ring] == anchor):
                    accepted = (fp, [anchor])
                    break
                continue
            if not np.any(hit == anchor):
                continue
            accepted = (fp, np.unique(hit[hit > 0]).tolist())
            break
        if accepted is None:
            continue
        (rr, cc), partners = accepted
        area_new = rr.size
        hit = instances[rr, cc]
        ok = True
        for p in partners:
            ov = int(np.sum(hit == p))
            current = int(np.sum(instances == p))
            if params.max_overlap > 0 and ov > params.max_overlap * min(area_new, full_area[p - 1]):
                ok = False
            if current - ov < 0.5 * full_area[p - 1]:
                ok = False
        if not ok:
            continue
        label = place(rr, cc, nucleus)
        overlap_pairs.extend((p, label) for p in partners)
        placed_clump += 1

    complete = placed_single + placed_clump == n
    if not complete:
        logger.warning(
            "placed %d of %d nuclei within %d attempts (seed %d)",
            placed_single + placed_clump, n, budget, seed,
        )
    return SynthMaskPair(
        render=instances > 0,
        instances=instances,
        seed=int(seed),
        params=params,
        complete=complete,
        radii=radii,
        overlap_pairs=overlap_pairs,
    )


def seam_pixels(instances: np.ndarray) -> np.ndarray:
    """Pixels 8-adjacent to a higher-labeled instance.

    Removing them leaves no two distinct instances 8-connected.
    """
    inst = np.asarray(instances)
    padded = np.pad(inst, 1)
    H, W = inst.shape
    seam = np.zeros((H, W), bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            nb = padded[1 + dy : 1 + dy + H, 1 + dx : 1 + dx + W]
            seam |= (inst > 0) & (nb > inst)
    return seam


def render_mask_image(pair: SynthMaskPair | np.ndarray) -> np.ndarray:
    """Three-channel render: nuclei white, background black, seams mid-gray."""
    inst = pair.instances if isinstance(pair, SynthMaskPair) else np.asarray(pair)
    out = np.where(inst > 0, 255, 0).astype(np.uint8)
    out[seam_pixels(inst)] = SEAM_VALUE
    return np.repeat(out[:, :, None], 3, axis=2)
