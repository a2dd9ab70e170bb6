"""Evaluation metrics: distortion, PSNR, SSIM, leakage, identification.

All statistics run in float64. PSNR is defined so that with a unit pixel
range it equals -10*log10(distortion) bit-exactly, which ties the distortion
loss and the fidelity metric together in tests.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from privsem.errors import ConfigurationError, DimensionError
from privsem.imaging import BinaryMask, Image, mask_bbox

PSNR_CAP_DB = 100.0

# ITU-R 601 luma weights
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


def distortion(reference: Image, reconstructed: Image) -> float:
    """Mean squared error over all pixels; lies in [0, 1] for [0, 1] images."""
    if reference.shape != reconstructed.shape:
        raise DimensionError(f"shape mismatch {reference.shape} vs {reconstructed.shape}")
    a = reference.pixels.astype(np.float64)
    b = reconstructed.pixels.astype(np.float64)
    return float(np.mean((a - b) ** 2))


def mse_to_psnr(mse: float, max_value: float = 1.0, cap: float = PSNR_CAP_DB) -> float:
    if mse <= 0.0:
        return cap
    return min(cap, 20.0 * np.log10(max_value) - 10.0 * float(np.log10(mse)))


def psnr(reference: Image, reconstructed: Image, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 dB when MSE is zero."""
    return mse_to_psnr(distortion(reference, reconstructed), max_value)


def psnr_region(reference: Image, reconstructed: Image, mask: BinaryMask) -> float:
    """PSNR restricted to the bounding box of the mask."""
    r0, r1, c0, c1 = mask_bbox(mask)
    a = Image(reference.pixels[:, r0:r1, c0:c1])
    b = Image(reconstructed.pixels[:, r0:r1, c0:c1])
    return psnr(a, b)


def psnr_masked_pixels(reference: Image, reconstructed: Image, mask: BinaryMask) -> float:
    """PSNR over exactly the masked pixels."""
    m = mask.bits.astype(bool)
    if not m.any():
        raise ConfigurationError("mask has no set bits")
    a = reference.pixels.astype(np.float64)[:, m]
    b = reconstructed.pixels.astype(np.float64)[:, m]
    return mse_to_psnr(float(np.mean((a - b) ** 2)))


@dataclass(frozen=True)
class SsimParams:
    """Stabilizers, exponents, and window size for the structural similarity index."""

    c1: float = 0.01**2
    c2: float = 0.03**2
    c3: float | None = None  # defaults to c2 / 2
    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 1.0
    window: int = 8

    def __post_init__(self):
        if self.c1 <= 0 or self.c2 <= 0 or (self.c3 is not None and self.c3 <= 0):
            raise ConfigurationError("SSIM stabilizers must be positive")
        if self.window < 2:
            raise ConfigurationError("SSIM window must be at least 2")

    @property
    def c3_value(self) -> float:
        return self.c2 / 2.0 if self.c3 is None else self.c3


def to_luma(image: Image) -> np.ndarray:
    """Collapse to a (H, W) float64 luma plane (ITU-R 601 weights for RGB)."""
    px = image.pixels.astype(np.float64)
    if image.channels == 1:
        return px[0]
    if image.channels == 3:
        return np.tensordot(_LUMA, px, axes=1)
    return px.mean(axis=0)


def _window_sums(plane: np.ndarray, w: int) -> np.ndarray:
    """Sums over all w*w windows at stride 1, via an integral image."""
    ii = np.zeros((plane.shape[0] + 1, plane.shape[1] + 1), dtype=np.float64)
    ii[1:, 1:] = plane.cumsum(axis=0).cumsum(axis=1)
    return ii[w:, w:] - ii[:-w, w:] - ii[w:, :-w] + ii[:-w, :-w]


def ssim(reference: Image, reconstructed: Image, params: SsimParams | None = None) -> float:
    """Mean three-factor structural similarity over sliding windows on luma.

    With unit exponents and c3 = c2/2 this reduces to the familiar two-factor
    form. Identical inputs give exactly 1.0.
    """
    params = params or SsimParams()
    if reference.shape != reconstructed.shape:
        raise DimensionError(f"shape mismatch {reference.shape} vs {reconstructed.shape}")
    w = params.window
    if w > reference.height or w > reference.width:
        raise ConfigurationError(f"SSIM window {w} exceeds image size {reference.shape[1:]}")
    s = to_luma(reference)
    r = to_luma(reconstructed)
    n = float(w * w)
    mu_s = _window_sums(s, w) / n
    mu_r = _window_sums(r, w) / n
    var_s = np.maximum(_window_sums(s * s, w) / n - mu_s * mu_s, 0.0)
    var_r = np.maximum(_window_sums(r * r, w) / n - mu_r * mu_r, 0.0)
    cov = _window_sums(s * r, w) / n - mu_s * mu_r
    sigma_s = np.sqrt(var_s)
    sigma_r = np.sqrt(var_r)
    # sqrt of the product (not product of sqrts) keeps ssim(x, x) == 1 exact
    sigma_sr = np.sqrt(var_s * var_r)
    c1, c2, c3 = params.c1, params.c2, params.c3_value
    lum = (2.0 * mu_s * mu_r + c1) / (mu_s**2 + mu_r**2 + c1)
    con = (2.0 * sigma_sr + c2) / (var_s + var_r + c2)
    stru = (cov + c3) / (sigma_sr + c3)
    for factor, alpha in ((lum, params.alpha1), (con, params.alpha2), (stru, params.alpha3)):
        if alpha != 1.0:
            np.power(factor, alpha, out=factor)
    return float(np.mean(lum * con * stru))


def ssim_region(reference: Image, reconstructed: Image, mask: BinaryMask,
                params: SsimParams | None = None) -> float:
    """SSIM over the mask bounding box, expanded to fit the window if needed."""
    params = params or SsimParams()
    r0, r1, c0, c1 = mask_bbox(mask)
    h, wid = reference.height, reference.width
    # grow the box symmetrically until it can hold at least one window
    while r1 - r0 < params.window:
        r0, r1 = max(0, r0 - 1), min(h, r1 + 1)
    while c1 - c0 < params.window:
        c0, c1 = max(0, c0 - 1), min(wid, c1 + 1)
    a = Image(reference.pixels[:, r0:r1, c0:c1])
    b = Image(reconstructed.pixels[:, r0:r1, c0:c1])
    return ssim(a, b, params)


def hard_leakage(candidate: Image, guard, db, true_entity: int) -> int:
    """1 iff the guard identifies the true entity in the candidate image."""
    match = guard.identify_image(candidate, db)
    return int(match is not None and match.entity_index == true_entity)


def identity_accuracy(samples, guard, db) -> tuple[float, int]:
    """Fraction of (image, entity) pairs whose identity the guard recovers."""
    total = 0
    hits = 0
    for image, true_entity in samples:
        hits += hard_leakage(image, guard, db, true_entity)
        total += 1
    if total == 0:
        raise ConfigurationError("identity accuracy needs a nonempty test set")
    return hits / total, total


REPORT_COLUMNS = [
    "image_id", "role", "snr_db", "entity_id",
    "psnr_full", "psnr_region", "psnr_masked", "ssim_full", "ssim_region",
    "distortion", "leakage", "identified",
]


@dataclass
class EvalReport:
    """Per-image metric rows plus aggregate views, serializable to CSV and JSON."""

    rows: list[dict] = field(default_factory=list)

    def add(self, **kwargs) -> None:
        missing = [c for c in REPORT_COLUMNS if c not in kwargs]
        if missing:
            raise ConfigurationError(f"report row missing columns: {missing}")
        self.rows.append({c: kwargs[c] for c in REPORT_COLUMNS})

    def aggregates(self) -> dict:
        """Mean of every numeric metric per (role, snr_db), with counts."""
        groups: dict[tuple, list[dict]] = {}
        for row in self.rows:
            groups.setdefault((row["role"], row["snr_db"]), []).append(row)
        out = {}
        metric_cols = REPORT_COLUMNS[4:]
        for (role, snr), rows in sorted(groups.items()):
            key = f"{role}@{snr:g}dB"
            out[key] = {"role": role, "snr_db": snr, "count": len(rows)}
            for col in metric_cols:
                out[key][f"mean_{col}"] = float(np.mean([r[col] for r in rows]))
        return out

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(REPORT_COLUMNS)
            for row in self.rows:
                writer.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])

    def write_summary_json(self, path: str | Path, extra: dict | None = None) -> None:
        payload = {"aggregates": self.aggregates(), "total_rows": len(self.rows)}
        if extra:
            payload.update(extra)
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    @classmethod
    def read_csv(cls, path: str | Path) -> "EvalReport":
        report = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                parsed = {}
                for col in REPORT_COLUMNS:
                    v = row[col]
                    if col in ("image_id", "role"):
                        parsed[col] = v
                    elif col in ("entity_id", "leakage", "identified"):
                        parsed[col] = int(v) if v != "" else None
                    else:
                        parsed[col] = float(v)
                report.rows.append(parsed)
        return report


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ""
    return str(value)
