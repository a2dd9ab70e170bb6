"""Synthetic entity-sprite corpus generation and external corpus ingestion.

Each privacy entity is an identity signature: a texture pattern, a two-color
palette, and a shape family. Sprites are rasterized onto procedural
backgrounds with exact ground-truth masks. A separate pretrain pool of decoy
sprites (random palettes kept far from every entity palette) and plain
backgrounds stands in for a general image corpus that contains no entity
identities.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from privsem.errors import ConfigurationError, IngestionError
from privsem.imaging import BinaryMask, Image, load_png, save_mask_png, save_png
from privsem.seeding import np_rng

SCHEMA_VERSION = 1

ENTITY_NAMES = ["ruby", "jade", "iris", "ember", "coral", "onyx", "pearl", "slate"]

# saturated, well-separated palette pairs; decoys must keep their distance
ENTITY_PALETTES = [
    ((0.85, 0.10, 0.10), (0.95, 0.85, 0.10)),
    ((0.10, 0.75, 0.20), (0.15, 0.90, 0.90)),
    ((0.15, 0.20, 0.90), (0.90, 0.15, 0.90)),
    ((0.95, 0.55, 0.05), (0.50, 0.10, 0.75)),
    ((0.90, 0.10, 0.45), (0.10, 0.35, 0.60)),
    ((0.25, 0.60, 0.05), (0.95, 0.95, 0.60)),
    ((0.05, 0.85, 0.65), (0.60, 0.30, 0.05)),
    ((0.92, 0.92, 0.92), (0.08, 0.08, 0.08)),
]

PATTERNS = ["stripes", "dots", "checker", "rings"]
SHAPES = ["disk", "square", "diamond", "triangle"]


@dataclass(frozen=True)
class SpriteSpec:
    """Knobs of the synthetic corpus."""

    n_entities: int = 4
    images_per_entity: int = 550
    height: int = 64
    width: int = 64
    radius_range: tuple[int, int] = (10, 16)
    samples_per_entity: int = 24          # closeup sample set shared via the database
    sample_radius_range: tuple[int, int] = (40, 48)  # sprite fills most of the frame
    pretrain_images: int = 400
    pretrain_background_fraction: float = 0.3
    decoy_min_palette_distance: float = 0.45
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if self.n_entities < 2:
            raise ConfigurationError("identification needs at least 2 entities")
        if self.n_entities > len(ENTITY_PALETTES):
            raise ConfigurationError(f"at most {len(ENTITY_PALETTES)} entities supported")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigurationError("split fractions must sum to 1")

    def signature(self, entity_id: int) -> dict:
        """Identity signature of entity k (1-based); signatures are pairwise distinct."""
        k = entity_id - 1
        return {
            "label": ENTITY_NAMES[k],
            "palette": ENTITY_PALETTES[k],
            "pattern": PATTERNS[k % len(PATTERNS)],
            "shape": SHAPES[k % len(SHAPES)],
        }


# ---------------------------------------------------------------------------
# procedural rendering


def _value_noise_background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    grid = rng.uniform(0.25, 0.75, size=(3, 5, 5)).astype(np.float32)
    ys = np.linspace(0, 4, h)
    xs = np.linspace(0, 4, w)
    y0 = np.floor(ys).astype(int).clip(0, 3)
    x0 = np.floor(xs).astype(int).clip(0, 3)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    g = grid
    top = g[:, y0][:, :, x0] * (1 - fx) + g[:, y0][:, :, x0 + 1] * fx
    bot = g[:, y0 + 1][:, :, x0] * (1 - fx) + g[:, y0 + 1][:, :, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def _gradient_background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    c0 = rng.uniform(0.2, 0.8, size=3).astype(np.float32)
    c1 = rng.uniform(0.2, 0.8, size=3).astype(np.float32)
    ang = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    proj = (np.cos(ang) * xx + np.sin(ang) * yy)
    proj = (proj - proj.min()) / max(float(np.ptp(proj)), 1e-6)
    return c0[:, None, None] * (1 - proj) + c1[:, None, None] * proj


def _blob_background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = rng.uniform(0.3, 0.7, size=3).astype(np.float32)
    img = np.broadcast_to(base[:, None, None], (3, h, w)).copy()
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        s = rng.uniform(6, 18)
        amp = rng.uniform(-0.2, 0.2, size=3).astype(np.float32)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s**2))
        img += amp[:, None, None] * bump[None]
    return img


_BACKGROUNDS = [_value_noise_background, _gradient_background, _blob_background]


def _render_background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    fn = _BACKGROUNDS[rng.integers(0, len(_BACKGROUNDS))]
    return np.clip(fn(rng, h, w), 0.05, 0.95).astype(np.float32)


def _shape_footprint(shape: str, h: int, w: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    dy, dx = yy - cy, xx - cx
    if shape == "disk":
        return dy**2 + dx**2 <= r**2
    if shape == "square":
        return (np.abs(dy) <= r * 0.9) & (np.abs(dx) <= r * 0.9)
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= r * 1.2
    if shape == "triangle":
        return (dy >= -r) & (dy <= r * 0.8) & (np.abs(dx) <= (dy + r) * 0.62)
    raise ConfigurationError(f"unknown shape {shape!r}")


def _texture(pattern: str, palette, h: int, w: int, cy: float, cx: float) -> np.ndarray:
    """Two-color texture field anchored at the sprite center."""
    c0 = np.asarray(palette[0], dtype=np.float32)[:, None, None]
    c1 = np.asarray(palette[1], dtype=np.float32)[:, None, None]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    dy, dx = yy - cy, xx - cx
    if pattern == "stripes":
        sel = (np.floor(dx / 3.0) % 2) == 0
    elif pattern == "dots":
        sel = ((dy % 5) - 2) ** 2 + ((dx % 5) - 2) ** 2 <= 2.5
    elif pattern == "checker":
        sel = ((np.floor(dy / 3.0) + np.floor(dx / 3.0)) % 2) == 0
    elif pattern == "rings":
        sel = (np.floor(np.sqrt(dy**2 + dx**2) / 3.0) % 2) == 0
    else:
        raise ConfigurationError(f"unknown pattern {pattern!r}")
    return np.where(sel[None], c0, c1)


def render_sprite_image(spec: SpriteSpec, signature: dict, rng: np.random.Generator,
                        closeup: bool = False) -> tuple[Image, BinaryMask]:
    """Scene image (small sprite, random placement) or closeup sample (sprite
    fills most of the frame, mild jitter)."""
    h, w = spec.height, spec.width
    bg = _render_background(rng, h, w)
    if closeup:
        r = float(rng.integers(spec.sample_radius_range[0], spec.sample_radius_range[1] + 1))
        cy = h / 2 + float(rng.integers(-3, 4))
        cx = w / 2 + float(rng.integers(-3, 4))
    else:
        r = float(rng.integers(spec.radius_range[0], spec.radius_range[1] + 1))
        margin = int(np.ceil(r * 1.3)) + 1
        cy = float(rng.integers(margin, h - margin))
        cx = float(rng.integers(margin, w - margin))
    footprint = _shape_footprint(signature["shape"], h, w, cy, cx, r)
    tex = _texture(signature["pattern"], signature["palette"], h, w, cy, cx)
    img = np.where(footprint[None], tex, bg)
    return Image(np.clip(img, 0.0, 1.0)), BinaryMask(footprint.astype(np.uint8))


def _decoy_signature(spec: SpriteSpec, rng: np.random.Generator) -> dict:
    entity_colors = np.array(
        [c for k in range(spec.n_entities) for c in spec.signature(k + 1)["palette"]],
        dtype=np.float32)

    def far_color():
        for _ in range(200):
            c = rng.uniform(0.1, 0.9, size=3).astype(np.float32)
            if np.linalg.norm(entity_colors - c, axis=1).min() >= spec.decoy_min_palette_distance:
                return tuple(float(v) for v in c)
        raise ConfigurationError("could not sample a decoy color far from entity palettes")

    return {
        "label": "decoy",
        "palette": (far_color(), far_color()),
        "pattern": PATTERNS[rng.integers(0, len(PATTERNS))],
        "shape": SHAPES[rng.integers(0, len(SHAPES))],
    }


# ---------------------------------------------------------------------------
# corpus generation


def generate(spec: SpriteSpec, out_dir: str | Path, seed: int) -> Path:
    """Write the full corpus; deterministic under (spec, seed)."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    (out / "pretrain").mkdir(exist_ok=True)

    rows = []
    n_train = int(spec.images_per_entity * spec.split_fractions[0])
    n_val = int(spec.images_per_entity * spec.split_fractions[1])
    idx = 0
    for entity_id in range(1, spec.n_entities + 1):
        sig = spec.signature(entity_id)
        for j in range(spec.images_per_entity):
            rng = np_rng(seed, "img", idx)
            image, mask = render_sprite_image(spec, sig, rng)
            name = f"img_{idx:05d}.png"
            save_png(image, out / "images" / name)
            save_mask_png(mask, out / "masks" / name)
            split = "train" if j < n_train else ("val" if j < n_train + n_val else "test")
            rows.append({"filename": name, "entity_id": entity_id,
                         "label": sig["label"], "split": split})
            idx += 1

    for entity_id in range(1, spec.n_entities + 1):
        sig = spec.signature(entity_id)
        folder = out / "samples" / f"entity_{entity_id:03d}"
        folder.mkdir(parents=True, exist_ok=True)
        for j in range(spec.samples_per_entity):
            rng = np_rng(seed, "sample", entity_id, j)
            image, _ = render_sprite_image(spec, sig, rng, closeup=True)
            save_png(image, folder / f"sample_{j:03d}.png")

    pretrain_names = []
    for j in range(spec.pretrain_images):
        rng = np_rng(seed, "pretrain", j)
        if rng.uniform() < spec.pretrain_background_fraction:
            img = Image(_render_background(rng, spec.height, spec.width))
        else:
            img, _ = render_sprite_image(spec, _decoy_signature(spec, rng), rng)
        name = f"pre_{j:05d}.png"
        save_png(img, out / "pretrain" / name)
        pretrain_names.append(name)

    with open(out / "labels.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["filename", "entity_id", "label", "split"])
        writer.writeheader()
        writer.writerows(rows)

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "n_entities": spec.n_entities,
        "images_per_entity": spec.images_per_entity,
        "samples_per_entity": spec.samples_per_entity,
        "height": spec.height,
        "width": spec.width,
        "entities": {str(k): spec.signature(k)["label"] for k in range(1, spec.n_entities + 1)},
        "counts": {s: sum(1 for r in rows if r["split"] == s) for s in ("train", "val", "test")},
        "pretrain_images": pretrain_names,
        "has_masks": True,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def ingest(corpus_path: str | Path, out_dir: str | Path, height: int = 64, width: int = 64,
           skip_bad: bool = False) -> Path:
    """Normalize a folder-per-entity corpus into the dataset layout (no masks)."""
    src = Path(corpus_path)
    folders = sorted(p for p in src.iterdir() if p.is_dir())
    if len(folders) < 2:
        raise IngestionError(f"{src}: need at least 2 entity folders, found {len(folders)}")

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    bad: list[str] = []
    idx = 0
    for entity_id, folder in enumerate(folders, start=1):
        files = sorted(p for p in folder.iterdir() if p.is_file())
        loaded = []
        for f in files:
            try:
                pil = PILImage.open(f).convert("RGB")
            except Exception:
                bad.append(str(f))
                continue
            loaded.append(_center_crop_resize(pil, height, width))
        if len(loaded) < 5:
            raise IngestionError(f"{folder}: need at least 5 readable images, got {len(loaded)}")
        for arr in loaded:
            name = f"img_{idx:05d}.png"
            save_png(Image(arr), out / "images" / name)
            n_total = len(loaded)
            j = idx - sum(r["entity_id"] < entity_id for r in rows)  # index within entity
            split = "train" if j < int(0.8 * n_total) else (
                "val" if j < int(0.9 * n_total) else "test")
            rows.append({"filename": name, "entity_id": entity_id,
                         "label": folder.name, "split": split})
            idx += 1
    if bad and not skip_bad:
        raise IngestionError("unreadable files: " + ", ".join(bad))

    with open(out / "labels.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["filename", "entity_id", "label", "split"])
        writer.writeheader()
        writer.writerows(rows)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": None,
        "n_entities": len(folders),
        "height": height,
        "width": width,
        "entities": {str(i + 1): f.name for i, f in enumerate(folders)},
        "counts": {s: sum(1 for r in rows if r["split"] == s) for s in ("train", "val", "test")},
        "pretrain_images": [],
        "has_masks": False,
        "skipped_files": bad,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def _center_crop_resize(pil: PILImage.Image, height: int, width: int) -> np.ndarray:
    w, h = pil.size
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    pil = pil.crop((left, top, left + side, top + side)).resize((width, height),
                                                                PILImage.BILINEAR)
    return np.transpose(np.asarray(pil, dtype=np.float32) / 255.0, (2, 0, 1))


# ---------------------------------------------------------------------------
# loading


@dataclass
class SpriteDataset:
    """In-memory view of a generated corpus."""

    root: Path
    manifest: dict
    filenames: list[str]
    entity_ids: np.ndarray
    labels: list[str]
    splits: np.ndarray  # of strings
    images: np.ndarray  # (n, 3, H, W) float32
    masks: np.ndarray | None  # (n, H, W) uint8

    @classmethod
    def load(cls, root: str | Path) -> "SpriteDataset":
        root = Path(root)
        manifest = json.loads((root / "manifest.json").read_text())
        if manifest.get("schema_version") != SCHEMA_VERSION:
            raise ConfigurationError(
                f"unsupported dataset schema {manifest.get('schema_version')}")
        rows = list(csv.DictReader(open(root / "labels.csv")))
        filenames = [r["filename"] for r in rows]
        images = np.stack([load_png(root / "images" / f).pixels for f in filenames])
        masks = None
        if manifest.get("has_masks"):
            from privsem.imaging import load_mask_png
            masks = np.stack([load_mask_png(root / "masks" / f).bits for f in filenames])
        return cls(
            root=root, manifest=manifest, filenames=filenames,
            entity_ids=np.array([int(r["entity_id"]) for r in rows]),
            labels=[r["label"] for r in rows],
            splits=np.array([r["split"] for r in rows]),
            images=images, masks=masks)

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == split)

    def pretrain_pixels(self) -> list[np.ndarray]:
        return [load_png(self.root / "pretrain" / f).pixels
                for f in self.manifest.get("pretrain_images", [])]

    def sample_pixels(self, entity_id: int) -> list[np.ndarray]:
        """Closeup sample set of one entity (the database sample images)."""
        folder = self.root / "samples" / f"entity_{entity_id:03d}"
        n = int(self.manifest.get("samples_per_entity", 0))
        return [load_png(folder / f"sample_{j:03d}.png").pixels for j in range(n)]

    @property
    def n_entities(self) -> int:
        return int(self.manifest["n_entities"])

    def label_of(self, entity_id: int) -> str:
        return self.manifest["entities"][str(entity_id)]
