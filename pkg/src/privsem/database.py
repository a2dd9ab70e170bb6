"""Shared privacy database: entity prototypes, sample sets, embeddings.

Built once from a trained feature encoder, persisted as a directory, and
loaded read-only at both authorized ends. Features are pinned to the encoder
that produced them through a parameter fingerprint; loading against a
different encoder fails fast.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from privsem.container import load_arrays, save_arrays
from privsem.errors import ConfigurationError, DimensionError, StaleDatabaseError, VersionError
from privsem.imaging import Image, load_png, save_png
from privsem.seeding import np_rng

DB_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class PrivacyEntity:
    """One protected identity: index, label, sample images, prototype feature."""

    index: int
    label: str
    samples: list[Image]
    feature: np.ndarray

    def __post_init__(self):
        if not self.samples:
            raise ConfigurationError(f"entity {self.index} has no sample images")
        f = np.asarray(self.feature, dtype=np.float32).reshape(-1)
        norm = float(np.linalg.norm(f))
        if abs(norm - 1.0) > 1e-5:
            raise ConfigurationError(f"entity {self.index} feature is not unit norm ({norm})")
        object.__setattr__(self, "feature", f)


@dataclass(frozen=True)
class PrivacyDatabase:
    entities: list[PrivacyEntity]
    encoder_fingerprint: str
    embedding_table: np.ndarray  # (N, d) one row per entity label

    def __post_init__(self):
        idx = [e.index for e in self.entities]
        if len(set(idx)) != len(idx):
            raise ConfigurationError("entity indices must be unique")
        table = np.asarray(self.embedding_table, dtype=np.float32)
        if table.shape[0] != len(self.entities):
            raise DimensionError("embedding table must have one row per entity")
        d = np.linalg.norm(table[:, None, :] - table[None, :, :], axis=2)
        np.fill_diagonal(d, np.inf)
        if table.shape[0] > 1 and d.min() <= 0.0:
            raise ConfigurationError("embedding table rows must be pairwise distinct")
        object.__setattr__(self, "embedding_table", table)

    @property
    def n(self) -> int:
        return len(self.entities)

    @property
    def feature_dim(self) -> int:
        return self.entities[0].feature.shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.embedding_table.shape[1]

    def feature_matrix(self) -> np.ndarray:
        return np.stack([e.feature for e in self.entities])

    def entity(self, index: int) -> PrivacyEntity:
        for e in self.entities:
            if e.index == index:
                return e
        raise KeyError(f"no entity with index {index}")

    def embedding(self, index: int) -> np.ndarray:
        self.entity(index)
        return self.embedding_table[index - 1]

    def with_embeddings(self, table: np.ndarray) -> "PrivacyDatabase":
        return PrivacyDatabase(self.entities, self.encoder_fingerprint, table)


def build_database(entity_folders: list[tuple[str, list[Image]]], encoder,
                   embedding_dim: int = 64, seed: int = 0) -> PrivacyDatabase:
    """Prototype features: pooled encoder outputs averaged per entity, normalized.

    entity_folders is an ordered list of (label, sample images); entity k gets
    index k (1-based). The embedding table starts as distinct random unit
    vectors and may be fine-tuned later during recovery-model training.
    """
    if not entity_folders:
        raise ConfigurationError("cannot build a database with no entities")
    entities = []
    for k, (label, samples) in enumerate(entity_folders, start=1):
        if not samples:
            raise ConfigurationError(f"entity {label!r} has no sample images")
        pooled = np.stack([encoder.pooled_feature(img) for img in samples])
        mean = pooled.mean(axis=0)
        norm = float(np.linalg.norm(mean))
        if norm <= 0:
            raise ConfigurationError(f"entity {label!r} produced a zero prototype")
        entities.append(PrivacyEntity(k, label, list(samples), (mean / norm).astype(np.float32)))
    rng = np_rng(seed, "db-embeddings")
    table = rng.standard_normal((len(entities), embedding_dim)).astype(np.float32)
    table /= np.linalg.norm(table, axis=1, keepdims=True)
    return PrivacyDatabase(entities, encoder.fingerprint(), table)


def save_database(db: PrivacyDatabase, path: str | Path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for e in db.entities:
        folder = root / "entities" / f"entity_{e.index:03d}"
        folder.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(e.samples):
            save_png(img, folder / f"sample_{i:03d}.png")
    save_arrays(root / "features.psar", {"features": db.feature_matrix()})
    save_arrays(root / "embeddings.psar", {"embedding_table": db.embedding_table})
    manifest = {
        "schema_version": DB_SCHEMA_VERSION,
        "n_entities": db.n,
        "feature_dim": db.feature_dim,
        "embedding_dim": db.embedding_dim,
        "encoder_fingerprint": db.encoder_fingerprint,
        "entities": {str(e.index): {"label": e.label, "samples": len(e.samples)}
                     for e in db.entities},
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_database(path: str | Path, expected_fingerprint: str | None = None
                  ) -> PrivacyDatabase:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("schema_version") != DB_SCHEMA_VERSION:
        raise VersionError(
            f"{root}: unsupported database schema {manifest.get('schema_version')}")
    if expected_fingerprint is not None and manifest["encoder_fingerprint"] != expected_fingerprint:
        raise StaleDatabaseError(
            f"{root}: database was built by encoder {manifest['encoder_fingerprint'][:12]}..., "
            f"active encoder is {expected_fingerprint[:12]}...")
    features, _ = load_arrays(root / "features.psar")
    embeddings, _ = load_arrays(root / "embeddings.psar")
    entities = []
    for key, info in sorted(manifest["entities"].items(), key=lambda kv: int(kv[0])):
        index = int(key)
        folder = root / "entities" / f"entity_{index:03d}"
        samples = [load_png(folder / f"sample_{i:03d}.png") for i in range(info["samples"])]
        entities.append(PrivacyEntity(index, info["label"], samples,
                                      features["features"][index - 1]))
    return PrivacyDatabase(entities, manifest["encoder_fingerprint"],
                           embeddings["embedding_table"])
