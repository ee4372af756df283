"""Single-file network checkpoints.

An archive is an uncompressed ``.npz`` holding the header string, the
network spec as JSON, optional JSON extras, and one array per state entry
under ``state/<name>``. No pickled objects are stored.
"""
from __future__ import annotations

import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .nn_blocks import NetworkSpec, build_network

HEADER = "nucleigan-ckpt-v1"


class CheckpointError(ValueError):
    pass


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path: str | Path, net: nn.Module, spec: NetworkSpec, extras: dict | None = None) -> None:
    arrays = {
        "header": np.array(HEADER),
        "spec": np.array(json.dumps(spec.to_dict(), sort_keys=True)),
        "extras": np.array(json.dumps(extras or {}, sort_keys=True)),
    }
    for name, t in net.state_dict().items():
        arrays[f"state/{name}"] = t.detach().cpu().numpy()
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[nn.Module, NetworkSpec, dict]:
    with np.load(path, allow_pickle=False) as z:
        if "header" not in z.files or str(z["header"]) != HEADER:
            raise CheckpointError(f"{path}: not a {HEADER} archive")
        spec = NetworkSpec(**json.loads(str(z["spec"])))
        extras = json.loads(str(z["extras"]))
        state = {k[len("state/"):]: torch.from_numpy(z[k].copy()) for k in z.files if k.startswith("state/")}
    net = build_network(spec)
    missing, unexpected = net.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise CheckpointError(f"{path}: state mismatch (missing={missing}, unexpected={unexpected})")
    return net, spec, extras
