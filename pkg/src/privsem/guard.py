"""Transmitter-side privacy guard: detect, localize, and mask entities.

A small strided conv encoder produces a feature grid; each local patch is
pooled, normalized, and scored against every database prototype by cosine
similarity. Cells above the threshold vote for an entity; the winning
entity's cell set seeds a mask decoder that emits per-pixel logits at image
resolution. The masked image replaces the entity's pixels by the sentinel.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from privsem.container import load_state_dict, save_state_dict, state_fingerprint
from privsem.database import PrivacyDatabase
from privsem.errors import ConfigurationError, StaleDatabaseError
from privsem.imaging import BinaryMask, Image, SentinelSpec, apply_mask
from privsem.seeding import derive_seed, torch_gen

DEFAULT_THRESHOLD = 0.6
GRID_STRIDE = 8  # encoder reduces 64x64 to an 8x8 grid


class FeatureEncoder(nn.Module):
    """Four-block strided conv encoder; 64x64x3 -> (feature_dim, 8, 8)."""

    def __init__(self, feature_dim: int = 128):
        super().__init__()
        self.feature_dim = feature_dim
        self.net = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1), nn.GroupNorm(8, 32), nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.GroupNorm(8, 64), nn.SiLU(),
            nn.Conv2d(64, 96, 3, stride=2, padding=1), nn.GroupNorm(8, 96), nn.SiLU(),
            nn.Conv2d(96, feature_dim, 3, stride=1, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)

    def feature_map(self, image: Image) -> torch.Tensor:
        self.eval()
        with torch.no_grad():
            return self(torch.from_numpy(image.pixels)[None])[0]

    def pooled_feature(self, image: Image) -> np.ndarray:
        """Globally pooled, unit-normalized feature vector (prototype input)."""
        feat = self.feature_map(image).mean(dim=(1, 2))
        v = feat.numpy().astype(np.float32)
        n = float(np.linalg.norm(v))
        if n <= 0:
            raise ConfigurationError("encoder produced a zero pooled feature")
        return v / n

    def fingerprint(self) -> str:
        return state_fingerprint(self.state_dict())


def cell_embeddings(feature_map: torch.Tensor) -> torch.Tensor:
    """Local 3x3 window pooling over the grid, then unit normalization.

    Accepts (d, g, g) or (batch, d, g, g); returns the same layout.
    """
    single = feature_map.dim() == 3
    f = feature_map[None] if single else feature_map
    pooled = nn.functional.avg_pool2d(f, kernel_size=3, stride=1, padding=1,
                                      count_include_pad=False)
    pooled = pooled / pooled.norm(dim=1, keepdim=True).clamp_min(1e-12)
    return pooled[0] if single else pooled


@dataclass(frozen=True)
class PatchMatch:
    """Cells of the feature grid that matched one entity above the threshold."""

    entity_index: int
    locations: tuple[tuple[int, int], ...]
    scores: tuple[float, ...]

    def __post_init__(self):
        if not self.locations:
            raise ConfigurationError("a reported match needs at least one location")

    @property
    def mean_score(self) -> float:
        return float(np.mean(self.scores))

    @property
    def best_score(self) -> float:
        return float(np.max(self.scores))


def identify(feature_map: torch.Tensor, db: PrivacyDatabase, threshold: float,
             expected_fingerprint: str | None = None) -> PatchMatch | None:
    """Cosine-match pooled cells against every prototype; majority entity wins.

    Ties on cell count break by higher mean score, then lower index.
    """
    if expected_fingerprint is not None and expected_fingerprint != db.encoder_fingerprint:
        raise StaleDatabaseError("feature map and database come from different encoders")
    cells = cell_embeddings(feature_map)           # (d, g, g)
    protos = torch.from_numpy(db.feature_matrix())  # (N, d)
    scores = torch.einsum("nd,dhw->nhw", protos, cells)
    best_scores, best_entity = scores.max(dim=0)
    hits = best_scores > threshold
    if not bool(hits.any()):
        return None
    candidates = []
    for k in range(db.n):
        sel = hits & (best_entity == k)
        count = int(sel.sum())
        if count == 0:
            continue
        locs = torch.nonzero(sel)
        cell_scores = best_scores[sel]
        candidates.append((
            count, float(cell_scores.mean()), -(k + 1),
            PatchMatch(
                entity_index=k + 1,
                locations=tuple((int(r), int(c)) for r, c in locs),
                scores=tuple(float(s) for s in cell_scores),
            )))
    candidates.sort(key=lambda c: (c[0], c[1], c[2]), reverse=True)
    return candidates[0][3]


class MaskDecoder(nn.Module):
    """Feature grid + match heatmap -> per-pixel logits at image resolution."""

    def __init__(self, feature_dim: int = 128):
        super().__init__()
        self.feature_dim = feature_dim
        self.net = nn.Sequential(
            nn.Conv2d(feature_dim + 1, 96, 3, padding=1), nn.GroupNorm(8, 96), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(96, 48, 3, padding=1), nn.GroupNorm(8, 48), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(48, 24, 3, padding=1), nn.GroupNorm(8, 24), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(24, 1, 3, padding=1),
        )

    def forward(self, feature_map: torch.Tensor, heatmap: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([feature_map, heatmap], dim=1))[:, 0]


def match_heatmap(match: PatchMatch, grid: int) -> torch.Tensor:
    hm = torch.zeros(1, 1, grid, grid)
    for r, c in match.locations:
        hm[0, 0, r, c] = 1.0
    return hm


@dataclass
class GuardResult:
    masked: Image
    entity_id: int | None
    embedding: np.ndarray | None  # None stands for the reserved null condition
    mask: BinaryMask | None
    match: PatchMatch | None


class GuardModel:
    """Encoder + identifier + mask decoder bundle, plus the sentinel policy."""

    def __init__(self, encoder: FeatureEncoder, decoder: MaskDecoder,
                 threshold: float = DEFAULT_THRESHOLD,
                 sentinel: SentinelSpec | None = None):
        self.encoder = encoder
        self.decoder = decoder
        self.threshold = threshold
        self.sentinel = sentinel or SentinelSpec()
        self._fingerprint: str | None = None

    def fingerprint(self) -> str:
        # cached; guard models are frozen once constructed for inference
        if self._fingerprint is None:
            self._fingerprint = self.encoder.fingerprint()
        return self._fingerprint

    def identify_image(self, image: Image, db: PrivacyDatabase) -> PatchMatch | None:
        return identify(self.encoder.feature_map(image), db, self.threshold,
                        expected_fingerprint=self.fingerprint())

    def predict_mask(self, image: Image, match: PatchMatch) -> BinaryMask:
        self.decoder.eval()
        with torch.no_grad():
            feat = self.encoder.feature_map(image)[None]
            logits = self.decoder(feat, match_heatmap(match, feat.shape[-1]))
        return BinaryMask((torch.sigmoid(logits[0]) > 0.5).numpy().astype(np.uint8))

    def __call__(self, image: Image, db: PrivacyDatabase) -> GuardResult:
        match = self.identify_image(image, db)
        if match is None:
            return GuardResult(image, None, None, None, None)
        mask = self.predict_mask(image, match)
        if not mask.any():
            # decoder produced an empty region; treat as no detection
            return GuardResult(image, None, None, None, match)
        masked = apply_mask(image, mask, self.sentinel)
        return GuardResult(masked, match.entity_index, db.embedding(match.entity_index),
                           mask, match)

    def save(self, path: str | Path) -> None:
        state = {f"encoder.{k}": v for k, v in self.encoder.state_dict().items()}
        state.update({f"decoder.{k}": v for k, v in self.decoder.state_dict().items()})
        meta = {
            "threshold": self.threshold,
            "feature_dim": self.encoder.feature_dim,
            "sentinel_color": self.sentinel.color.tolist(),
            "sentinel_tolerance": self.sentinel.tolerance,
        }
        save_state_dict(path, state, meta)

    @classmethod
    def load(cls, path: str | Path) -> "GuardModel":
        state, meta = load_state_dict(path)
        encoder = FeatureEncoder(meta["feature_dim"])
        decoder = MaskDecoder(meta["feature_dim"])
        encoder.load_state_dict({k[len("encoder."):]: v for k, v in state.items()
                                 if k.startswith("encoder.")})
        decoder.load_state_dict({k[len("decoder."):]: v for k, v in state.items()
                                 if k.startswith("decoder.")})
        sentinel = SentinelSpec(np.array(meta["sentinel_color"], dtype=np.float32),
                                meta["sentinel_tolerance"])
        return cls(encoder, decoder, meta["threshold"], sentinel)


# ---------------------------------------------------------------------------
# training


def _grid_labels(masks: torch.Tensor, entity_ids: torch.Tensor, grid: int
                 ) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-cell targets: entity id where the cell is mostly masked, 0 for
    clear background, -1 for ambiguous cells that are excluded from the loss."""
    cover = nn.functional.avg_pool2d(masks.float()[:, None], GRID_STRIDE)[:, 0]
    labels = torch.full(cover.shape, -1, dtype=torch.long)
    for i in range(len(entity_ids)):
        labels[i][cover[i] >= 0.5] = int(entity_ids[i])
    labels[cover <= 0.05] = 0
    return labels, cover


def train_guard(images: np.ndarray, masks: np.ndarray, entity_ids: np.ndarray,
                proto_images: dict[int, np.ndarray], val: tuple | None = None,
                feature_dim: int = 128, threshold: float = DEFAULT_THRESHOLD,
                epochs: int = 16, batch: int = 32, lr: float = 1e-3, seed: int = 0,
                temperature: float = 0.1, bg_margin: float = 0.1, fg_margin: float = 0.1,
                bg_weight: float = 2.0,
                iou_target: float = 0.7, id_target: float = 0.95,
                sentinel: SentinelSpec | None = None,
                start_epoch: int = 0, state: dict | None = None,
                epoch_callback=None) -> tuple[GuardModel, dict]:
    """Prototype-contrastive encoder training plus BCE mask-decoder training.

    Episodic prototypes: each step builds entity prototypes from a few
    randomly drawn sample images with gradients flowing through them, so the
    cell-vs-prototype geometry being optimized is exactly the geometry the
    identifier uses at inference (and representation collapse is penalized
    by the classification loss instead of silently feeding back). Background
    cells get their own learned prototype as an attractor; hinges push
    entity cells above the detection threshold and background cells below
    it. Non-convergence is reported in the returned dict, not raised.
    """
    torch.manual_seed(derive_seed(seed, "guard-init"))
    encoder = FeatureEncoder(feature_dim)
    decoder = MaskDecoder(feature_dim)
    bg_proto = torch.nn.Parameter(torch.randn(feature_dim) / np.sqrt(feature_dim))
    opt = torch.optim.Adam(
        list(encoder.parameters()) + list(decoder.parameters()) + [bg_proto], lr=lr)
    milestones = [max(1, int(epochs * 0.6)), max(2, int(epochs * 0.85))]
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=milestones, gamma=0.3)
    if state is not None:
        encoder.load_state_dict(state["encoder"])
        decoder.load_state_dict(state["decoder"])
        with torch.no_grad():
            bg_proto.copy_(state["bg_proto"])
        opt.load_state_dict(state["opt"])
        sched.load_state_dict(state["sched"])

    data = torch.from_numpy(images)
    mask_t = torch.from_numpy(masks.astype(np.float32))
    ids_t = torch.from_numpy(entity_ids.astype(np.int64))
    entity_list = sorted(proto_images)
    grid = images.shape[-1] // GRID_STRIDE
    labels, _ = _grid_labels(torch.from_numpy(masks), ids_t, grid)
    heat = nn.functional.max_pool2d(mask_t[:, None], GRID_STRIDE)  # teacher-forced seeds

    proto_data = {k: torch.from_numpy(v) for k, v in proto_images.items()}
    history = []
    for epoch in range(start_epoch, epochs):
        gen = torch_gen(seed, "guard", epoch)
        encoder.train()
        decoder.train()
        order = torch.randperm(len(data), generator=gen)
        ep_emb, ep_mask, nb = 0.0, 0.0, 0
        for lo in range(0, len(order), batch):
            sel = order[lo:lo + batch]
            feats = encoder(data[sel])
            cells = cell_embeddings(feats)                       # (B, d, g, g)
            protos = _episode_prototypes(encoder, proto_data, entity_list, gen,
                                         per_entity=4)
            bg_dir = bg_proto / bg_proto.norm().clamp_min(1e-12)
            all_protos = torch.cat([protos, bg_dir[None]])
            scores = torch.einsum("nd,bdhw->bnhw", all_protos, cells)
            lab = labels[sel]
            known = lab >= 0
            cell_scores = scores.permute(0, 2, 3, 1)[known]
            target = torch.tensor([
                len(entity_list) if v == 0 else entity_list.index(int(v))
                for v in lab[known]])
            emb_loss = nn.functional.cross_entropy(cell_scores / temperature, target)
            fg_sel = target < len(entity_list)
            if bool(fg_sel.any()):
                own = cell_scores[fg_sel].gather(1, target[fg_sel][:, None])[:, 0]
                emb_loss = emb_loss + nn.functional.relu(
                    (threshold + fg_margin) - own).mean()
            if bool((~fg_sel).any()):
                bg_best = cell_scores[~fg_sel][:, :len(entity_list)].max(dim=1).values
                emb_loss = emb_loss + bg_weight * nn.functional.relu(
                    bg_best - (threshold - bg_margin)).mean()
            logits = decoder(feats, heat[sel])
            mask_loss = nn.functional.binary_cross_entropy_with_logits(logits, mask_t[sel])
            loss = emb_loss + mask_loss
            opt.zero_grad()
            loss.backward()
            opt.step()
            ep_emb += float(emb_loss.item())
            ep_mask += float(mask_loss.item())
            nb += 1
        sched.step()
        history.append({"epoch": epoch, "embed_loss": ep_emb / nb, "mask_loss": ep_mask / nb})
        if epoch_callback:
            epoch_callback(epoch, {"encoder": encoder.state_dict(),
                                   "decoder": decoder.state_dict(),
                                   "bg_proto": bg_proto.detach().clone(),
                                   "opt": opt.state_dict(),
                                   "sched": sched.state_dict()})

    guard = GuardModel(encoder, decoder, threshold, sentinel)
    report: dict = {"history": history, "epochs": epochs}
    if val is not None:
        val_images, val_masks, val_ids, db = val
        iou, acc = evaluate_guard(guard, db, val_images, val_masks, val_ids)
        report.update({"val_iou": iou, "val_id_accuracy": acc,
                       "failed": iou < iou_target or acc < id_target})
    else:
        report["failed"] = False
    return guard, report


def _episode_prototypes(encoder: FeatureEncoder, proto_data: dict[int, torch.Tensor],
                        entity_list: list[int], gen: torch.Generator,
                        per_entity: int = 4) -> torch.Tensor:
    """Prototypes from a random sample subset, differentiable through the encoder."""
    protos = []
    for k in entity_list:
        pool = proto_data[k]
        take = min(per_entity, len(pool))
        sel = torch.randperm(len(pool), generator=gen)[:take]
        pooled = encoder(pool[sel]).mean(dim=(2, 3))
        pooled = pooled / pooled.norm(dim=1, keepdim=True).clamp_min(1e-12)
        mean = pooled.mean(dim=0)
        protos.append(mean / mean.norm().clamp_min(1e-12))
    return torch.stack(protos)


def evaluate_guard(guard: GuardModel, db: PrivacyDatabase, images: np.ndarray,
                   masks: np.ndarray, entity_ids: np.ndarray) -> tuple[float, float]:
    """Mean mask IoU and identification accuracy over a labeled split."""
    ious = []
    hits = 0
    for i in range(len(images)):
        img = Image(images[i])
        match = guard.identify_image(img, db)
        if match is not None and match.entity_index == int(entity_ids[i]):
            hits += 1
        if match is None:
            ious.append(0.0)
            continue
        pred = guard.predict_mask(img, match).bits.astype(bool)
        gt = masks[i].astype(bool)
        union = float(np.logical_or(pred, gt).sum())
        ious.append(float(np.logical_and(pred, gt).sum()) / union if union else 1.0)
    return float(np.mean(ious)), hits / len(images)
