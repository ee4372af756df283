"""Image IO and array/tensor conversions shared by the trainers and CLI."""
from __future__ import annotations

import io
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .checkpoint import atomic_write_bytes

IMAGE_SUFFIXES = (".png", ".tif", ".tiff")


def read_rgb(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def read_labels(path: str | Path) -> np.ndarray:
    """Single-channel integer label image (8- or 16-bit) as int32."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr.astype(np.int32)


def _encode(im: Image.Image, path: Path) -> bytes:
    buf = io.BytesIO()
    fmt = "TIFF" if path.suffix.lower() in (".tif", ".tiff") else "PNG"
    im.save(buf, format=fmt)
    return buf.getvalue()


def write_rgb(path: str | Path, rgb: np.ndarray) -> None:
    path = Path(path)
    atomic_write_bytes(path, _encode(Image.fromarray(np.asarray(rgb, dtype=np.uint8), "RGB"), path))


def write_gray8(path: str | Path, arr: np.ndarray) -> None:
    path = Path(path)
    atomic_write_bytes(path, _encode(Image.fromarray(np.asarray(arr, dtype=np.uint8), "L"), path))


def write_labels(path: str | Path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 65535:
        raise ValueError("instance labels must fit in 16 bits")
    path = Path(path)
    atomic_write_bytes(path, _encode(Image.fromarray(labels.astype(np.uint16)), path))


def list_images(directory: str | Path) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def rgb_to_tensor(rgb: np.ndarray) -> torch.Tensor:
    """uint8 (H, W, 3) -> float32 (1, 3, H, W) in [-1, 1]."""
    t = torch.from_numpy(np.ascontiguousarray(rgb, dtype=np.float32))
    return (t.permute(2, 0, 1) / 127.5 - 1.0).unsqueeze(0)


def tensor_to_rgb(t: torch.Tensor) -> np.ndarray:
    """(1, 3, H, W) or (3, H, W) in [-1, 1] -> uint8 (H, W, 3)."""
    t = t.detach().cpu().float()
    if t.dim() == 4:
        t = t[0]
    arr = ((t.clamp(-1, 1) + 1.0) * 127.5).round().permute(1, 2, 0).numpy()
    return arr.astype(np.uint8)


def render_to_tensor(render: np.ndarray) -> torch.Tensor:
    """Mask render (H, W) or (H, W, 3) uint8 -> (1, 1, H, W) in [-1, 1]."""
    arr = np.asarray(render)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return (torch.from_numpy(arr.astype(np.float32)) / 127.5 - 1.0)[None, None]


def render_to_target(render: np.ndarray) -> torch.Tensor:
    """Segmentation target: nucleus +1, background and seams -1."""
    arr = np.asarray(render)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return torch.from_numpy(np.where(arr == 255, 1.0, -1.0).astype(np.float32))[None, None]
