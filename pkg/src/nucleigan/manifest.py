"""Dataset manifests: which image/instance-map pairs exist and how they split.

On disk a manifest is JSON; record paths are stored relative to the
manifest's directory so a dataset directory can be moved or compared
byte-for-byte across runs.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .checkpoint import atomic_write_bytes

SPLITS = ("train", "test", "unassigned")
SOURCES = ("real", "synthetic")


class ManifestError(ValueError):
    pass


@dataclass
class ManifestRecord:
    image: str
    instance_map: str
    organ: str = "unknown"
    patient: str = "unknown"
    split: str = "unassigned"
    source: str = "real"
    seed: int | None = None
    render: str | None = None

    def __post_init__(self) -> None:
        if self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r}")
        if self.source not in SOURCES:
            raise ManifestError(f"unknown source {self.source!r}")


def utc_timestamp() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass
class DatasetManifest:
    records: list[ManifestRecord] = field(default_factory=list)
    config_hash: str = ""
    created_at: str = field(default_factory=utc_timestamp)

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def to_json(self, base: Path | None = None) -> str:
        def rel(p: str | None) -> str | None:
            if p is None or base is None:
                return p
            return Path(os.path.relpath(Path(p).resolve(), base.resolve())).as_posix()

        recs = []
        for r in self.records:
            d = asdict(r)
            d["image"], d["instance_map"], d["render"] = rel(r.image), rel(r.instance_map), rel(r.render)
            recs.append(d)
        doc = {"config_hash": self.config_hash, "created_at": self.created_at, "records": recs}
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        atomic_write_bytes(path, self.to_json(path.parent).encode("utf-8"))

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        doc = json.loads(path.read_text(encoding="utf-8"))
        base = path.parent
        records = []
        for d in doc["records"]:
            for key in ("image", "instance_map", "render"):
                if d.get(key) is not None:
                    d[key] = str((base / d[key]).resolve())
            records.append(ManifestRecord(**d))
        return cls(records, doc.get("config_hash", ""), doc.get("created_at", ""))

    def validate(self) -> None:
        """Raise if any referenced file is missing or an image sits in both splits."""
        missing = [
            p
            for r in self.records
            for p in (r.image, r.instance_map)
            if not Path(p).is_file()
        ]
        if missing:
            raise ManifestError(f"{len(missing)} manifest files missing, e.g. {missing[0]}")
        train = {Path(r.image).resolve() for r in self.split("train")}
        test = {Path(r.image).resolve() for r in self.split("test")}
        both = train & test
        if both:
            raise ManifestError(f"{len(both)} images appear in both train and test splits")
        tr_pat = {(r.organ, r.patient) for r in self.split("train") if r.source == "real"}
        te_pat = {(r.organ, r.patient) for r in self.split("test") if r.source == "real"}
        shared = {p for p in tr_pat & te_pat if p[1] != "unknown"}
        if shared:
            raise ManifestError(f"patients span both splits: {sorted(shared)}")


def merge_manifests(*manifests: DatasetManifest, config_hash: str = "", created_at: str | None = None) -> DatasetManifest:
    records = [r for m in manifests for r in m.records]
    return DatasetManifest(records, config_hash, created_at or utc_timestamp())
