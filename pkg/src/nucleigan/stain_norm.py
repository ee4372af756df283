"""Sparse two-stain separation and structure-preserving color normalization.

An RGB patch is moved to optical density (OD), factored as a nonnegative
2-column color basis times nonnegative density maps by alternating sparse
dictionary learning, and recolored with the basis of a target image.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS = 1.0
TISSUE_OD_THRESHOLD = 0.15
DEFAULT_SPARSITY = 0.1
COLLAPSE_ANGLE_DEG = 5.0


class InsufficientTissueError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


@dataclass
class ODImage:
    pixels: np.ndarray  # (H, W, 3) float64, >= 0
    background_intensity: float = 255.0

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class StainBasis:
    columns: np.ndarray  # (3, 2), hematoxylin first
    density_percentiles: np.ndarray  # (2,)

    @property
    def hematoxylin(self) -> np.ndarray:
        return self.columns[:, 0]

    @property
    def eosin(self) -> np.ndarray:
        return self.columns[:, 1]


@dataclass
class DensityMaps:
    maps: np.ndarray  # (H, W, 2)

    @property
    def height(self) -> int:
        return self.maps.shape[0]

    @property
    def width(self) -> int:
        return self.maps.shape[1]


def to_optical_density(img: np.ndarray, background_intensity: float = 255.0) -> ODImage:
    if background_intensity <= 0:
        raise ValueError(f"background_intensity must be positive, got {background_intensity}")
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) RGB image, got shape {img.shape}")
    od = -np.log10((img + EPS) / background_intensity)
    return ODImage(np.maximum(od, 0.0), float(background_intensity))


def from_optical_density(od: ODImage) -> np.ndarray:
    """Inverse of :func:`to_optical_density`; returns float RGB in [0, 255]."""
    rgb = od.background_intensity * np.power(10.0, -od.pixels) - EPS
    return np.clip(rgb, 0.0, 255.0)


def to_uint8(rgb: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def tissue_mask(od: ODImage, threshold: float = TISSUE_OD_THRESHOLD) -> np.ndarray:
    return np.linalg.norm(od.pixels, axis=-1) > threshold


def _solve_densities(basis: np.ndarray, X: np.ndarray, sparsity: float) -> np.ndarray:
    """Exact per-pixel minimizer of |x - B h|^2 + sparsity * sum(h) over h >= 0.

    ``basis`` is (3, 2), ``X`` is (N, 3); returns (N, 2). With two atoms the
    active set is one of four, so every candidate is evaluated and the best
    feasible one kept.
    """
    gram = basis.T @ basis
    corr = X @ basis - 0.5 * sparsity  # (N, 2)
    n = X.shape[0]
    candidates = np.zeros((4, n, 2))
    for k in range(2):
        if gram[k, k] > 0:
            candidates[1 + k, :, k] = np.maximum(corr[:, k] / gram[k, k], 0.0)
    det = gram[0, 0] * gram[1, 1] - gram[0, 1] ** 2
    if det > 1e-12:
        inv = np.array([[gram[1, 1], -gram[0, 1]], [-gram[0, 1], gram[0, 0]]]) / det
        both = corr @ inv.T
        feasible = np.all(both >= 0, axis=1)
        candidates[3][feasible] = both[feasible]
    resid = X[None, :, :] - candidates @ basis.T
    cost = np.sum(resid**2, axis=-1) + sparsity * candidates.sum(axis=-1)
    best = np.argmin(cost, axis=0)
    return candidates[best, np.arange(n)]


def dictionary_objective(basis: np.ndarray, X: np.ndarray, H: np.ndarray, sparsity: float) -> float:
    resid = X - H @ basis.T
    return float(np.sum(resid**2) + sparsity * np.sum(np.abs(H)))


def _update_basis(basis: np.ndarray, X: np.ndarray, H: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Block-coordinate basis step followed by unit renormalization.

    Each column is the exact minimizer of the residual over the set
    {b >= 0, |b| <= 1}; scaling a sub-unit column up to norm 1 while scaling
    its densities down keeps the reconstruction and shrinks the l1 term, so
    the objective cannot increase.
    """
    basis = basis.copy()
    H = H.copy()
    for k in range(2):
        hk = H[:, k]
        energy = float(hk @ hk)
        if energy <= 0:
            continue
        other = 1 - k
        R = X - np.outer(H[:, other], basis[:, other])
        col = np.maximum(R.T @ hk / energy, 0.0)
        norm = np.linalg.norm(col)
        if norm < 1e-12:
            continue
        if norm > 1.0:
            col = col / norm
            norm = 1.0
        basis[:, k] = col / norm
        H[:, k] = hk * norm
    return basis, H


def _initial_basis(X: np.ndarray, rng: np.random.Generator, n_candidates: int = 256) -> np.ndarray:
    nz = np.flatnonzero(np.linalg.norm(X, axis=1) > 0)
    if nz.size == 0:
        raise InsufficientTissueError("no nonzero optical densities to fit")
    idx = rng.choice(nz, size=min(n_candidates, nz.size), replace=False)
    cand = X[idx] / np.linalg.norm(X[idx], axis=1, keepdims=True)
    cosines = cand @ cand.T
    i, j = np.unravel_index(np.argmin(cosines), cosines.shape)
    basis = np.stack([cand[i], cand[j]], axis=1)
    if i == j:
        basis[:, 1] = np.abs(rng.normal(size=3))
        basis[:, 1] /= np.linalg.norm(basis[:, 1])
    return basis


def fit_dictionary(
    X: np.ndarray,
    sparsity: float = DEFAULT_SPARSITY,
    max_iters: int = 200,
    seed: int = 0,
    tol: float = 0.0,
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Alternating nonnegative sparse dictionary learning with two atoms.

    Returns ``(basis, densities, objective_history)`` for the rows of ``X``.
    The history holds the objective after initialization and after every
    density/basis alternation.
    """
    rng = np.random.default_rng(seed)
    basis = _initial_basis(X, rng)
    H = _solve_densities(basis, X, sparsity)
    history = [dictionary_objective(basis, X, H, sparsity)]
    for _ in range(max_iters):
        basis, H = _update_basis(basis, X, H)
        H = _solve_densities(basis, X, sparsity)
        obj = dictionary_objective(basis, X, H, sparsity)
        if not np.isfinite(obj) or not np.all(np.isfinite(basis)):
            raise NumericalError("non-finite value during stain dictionary learning")
        history.append(obj)
        if tol > 0 and history[-2] - obj <= tol * max(history[-2], 1e-12):
            break
    return basis, H, history


def order_stains(basis: np.ndarray, usage: np.ndarray | None = None) -> np.ndarray:
    """Column permutation putting the larger blue-channel OD first.

    An atom whose ``usage`` (total density) is below 1% of the other's is a
    degenerate fit and always goes last, whatever its color.
    """
    if usage is not None:
        if usage[0] < 0.01 * usage[1]:
            return np.array([1, 0])
        if usage[1] < 0.01 * usage[0]:
            return np.array([0, 1])
    if basis[2, 1] > basis[2, 0]:
        return np.array([1, 0])
    return np.array([0, 1])


def _split_collapsed(basis: np.ndarray, X: np.ndarray, min_angle_deg: float = COLLAPSE_ANGLE_DEG) -> np.ndarray:
    """Replace the second atom when both atoms converged to one color.

    Collinear atoms make the density split arbitrary. The merged direction
    is kept as the first atom and the second is refit to the nonnegative
    residual left after projecting the data onto it.
    """
    if angular_error_deg(basis[:, 0], basis[:, 1]) >= min_angle_deg:
        return basis
    b1 = basis.sum(axis=1)
    b1 /= np.linalg.norm(b1)
    resid = np.clip(X - np.outer(X @ b1, b1), 0.0, None)
    b2 = resid.sum(axis=0)
    if np.linalg.norm(b2) < 1e-12:
        b2 = np.where(b1 == b1.min(), 1.0, 0.0)
    b2 = b2 / np.linalg.norm(b2)
    return np.stack([b1, b2], axis=1)


def project_densities(od: ODImage, basis: np.ndarray) -> DensityMaps:
    """Nonnegative least-squares densities of every pixel under ``basis``."""
    X = od.pixels.reshape(-1, 3)
    H = _solve_densities(basis, X, 0.0)
    return DensityMaps(H.reshape(od.height, od.width, 2))


def _percentiles(maps: DensityMaps) -> np.ndarray:
    flat = maps.maps.reshape(-1, 2)
    return np.percentile(flat, 99, axis=0)


def estimate_stain_basis(
    od: ODImage,
    sparsity_weight: float = DEFAULT_SPARSITY,
    max_iters: int = 200,
    seed: int = 0,
) -> tuple[StainBasis, DensityMaps]:
    """Fit a hematoxylin/eosin basis to tissue pixels of ``od``.

    The basis is learned on pixels whose OD magnitude exceeds the tissue
    threshold; the returned density maps cover every pixel and are the
    nonnegative least-squares densities under the learned basis.
    """
    X = od.pixels.reshape(-1, 3)[tissue_mask(od).ravel()]
    if X.shape[0] < 100:
        raise InsufficientTissueError(
            f"insufficient tissue: {X.shape[0]} pixels above OD {TISSUE_OD_THRESHOLD}, need 100"
        )
    basis, H, _ = fit_dictionary(X, sparsity_weight, max_iters, seed)
    split = _split_collapsed(basis, X)
    if split is not basis:
        basis, H = split, _solve_densities(split, X, sparsity_weight)
    basis = basis[:, order_stains(basis, H.sum(axis=0))]
    maps = project_densities(od, basis)
    if not np.all(np.isfinite(maps.maps)):
        raise NumericalError("non-finite stain densities")
    return StainBasis(basis, _percentiles(maps)), maps


def normalize_to_target(
    src: np.ndarray,
    src_fit: tuple[StainBasis, DensityMaps],
    target_basis: StainBasis,
    background_intensity: float = 255.0,
) -> np.ndarray:
    """Recolor ``src`` with ``target_basis`` keeping its density structure.

    Returns float RGB in [0, 255] with the source's spatial dimensions.
    """
    src_basis, src_maps = src_fit
    h, w = np.asarray(src).shape[:2]
    if src_maps.maps.shape[:2] != (h, w):
        raise ValueError("density maps do not match the source image size")
    scale = np.ones(2)
    for k in range(2):
        if src_basis.density_percentiles[k] > 0:
            scale[k] = target_basis.density_percentiles[k] / src_basis.density_percentiles[k]
    H = src_maps.maps * scale
    od = H @ target_basis.columns.T
    return from_optical_density(ODImage(od, background_intensity))


def normalize_image(
    src: np.ndarray,
    target_basis: StainBasis,
    sparsity_weight: float = DEFAULT_SPARSITY,
    max_iters: int = 200,
    seed: int = 0,
) -> np.ndarray:
    """Fit ``src`` and normalize it to ``target_basis``; returns uint8 RGB."""
    od = to_optical_density(src)
    fit = estimate_stain_basis(od, sparsity_weight, max_iters, seed)
    return to_uint8(normalize_to_target(src, fit, target_basis))


def angular_error_deg(a: np.ndarray, b: np.ndarray) -> float:
    cos = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))
