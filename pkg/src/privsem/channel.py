"""Source quantization, learned block codec, and AWGN channel simulation.

The masked image and entity index are packed into a bitstream: a 16-bit
entity-id header (repeated 3x, majority-voted at the receiver) followed by
q-bit uniform pixel levels. The stream is split into b-bit blocks, each
treated as one of 2**b message classes. A learned constellation maps classes
to power-normalized symbol vectors; an MLP classifier inverts them after the
noisy channel.

Level 0 of the pixel quantizer is reserved for the sentinel color and the
content codebook starts at level 1, so a correctly decoded masked pixel is
always recoverable by sentinel detection and ordinary content never lands in
the tolerance band.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from privsem.errors import ConfigurationError, DimensionError, VersionError
from privsem.imaging import Image, SentinelSpec
from privsem.seeding import derive_seed, torch_gen

FRAME_MAGIC = b"PSFR"
FRAME_VERSION = 1

HEADER_FIELD_BITS = 16
HEADER_REPEATS = 3
HEADER_BITS = HEADER_FIELD_BITS * HEADER_REPEATS
_HEADER_SALT = 0xA  # keeps the all-zero field from parsing as a valid header


def snr_db_to_linear(snr_db: float) -> float:
    return float(10.0 ** (snr_db / 10.0))


@dataclass(frozen=True)
class ChannelConfig:
    """AWGN channel description plus the power/SNR feasibility constraints.

    noise_var is the per-real-dimension noise variance implied by snr_db under
    unit average symbol power at the transmitter.
    """

    snr_db: float
    gain: float = 1.0
    tau_thre: float = 1.0          # minimum admissible linear SNR
    p_max: float | None = None     # max frame energy; defaults to frame length
    bandwidth_b: float | None = None  # SNR-constraint normalizer; defaults to frame length

    def __post_init__(self):
        if self.gain <= 0:
            raise ConfigurationError("channel gain must be positive")
        if self.p_max is not None and self.p_max <= 0:
            raise ConfigurationError("p_max must be positive")
        if self.snr_linear < self.tau_thre:
            raise ConfigurationError(
                f"configured SNR {self.snr_db} dB is below the admissible threshold "
                f"tau_thre={self.tau_thre:g} (linear)")

    @property
    def snr_linear(self) -> float:
        return snr_db_to_linear(self.snr_db)

    @property
    def noise_var(self) -> float:
        return self.gain**2 / self.snr_linear


@dataclass(frozen=True)
class MessageClass:
    """One b-bit block interpreted as a class label in [0, 2**b)."""

    class_id: int
    block_bits: int

    def __post_init__(self):
        if not 0 <= self.class_id < (1 << self.block_bits):
            raise ConfigurationError(
                f"class id {self.class_id} out of range for {self.block_bits}-bit blocks")


@dataclass
class SymbolFrame:
    """Power-normalized channel symbols plus the block layout metadata."""

    symbols: np.ndarray          # (block_count * symbols_per_block,) float32
    block_bits: int
    symbols_per_block: int
    block_count: int
    snr_db: float

    def __post_init__(self):
        self.symbols = np.asarray(self.symbols, dtype=np.float32).reshape(-1)
        if self.symbols.size != self.block_count * self.symbols_per_block:
            raise DimensionError("symbol count does not match block layout")

    @property
    def energy(self) -> float:
        return float(np.sum(self.symbols.astype(np.float64) ** 2))


# ---------------------------------------------------------------------------
# bit packing


def levels_to_bits(levels: np.ndarray, q: int) -> np.ndarray:
    shifted = (levels.astype(np.uint8) << (8 - q))[:, None]
    return np.unpackbits(shifted, axis=1)[:, :q].reshape(-1)


def bits_to_levels(bits: np.ndarray, q: int) -> np.ndarray:
    groups = bits.reshape(-1, q).astype(np.uint16)
    weights = (1 << np.arange(q - 1, -1, -1)).astype(np.uint16)
    return (groups * weights).sum(axis=1).astype(np.uint8)


def bits_to_block_ids(bits: np.ndarray, b: int) -> np.ndarray:
    pad = (-len(bits)) % b
    if pad:
        bits = np.concatenate([bits, np.zeros(pad, dtype=bits.dtype)])
    groups = bits.reshape(-1, b).astype(np.int64)
    weights = (1 << np.arange(b - 1, -1, -1)).astype(np.int64)
    return groups @ weights


def block_ids_to_bits(ids: np.ndarray, b: int) -> np.ndarray:
    shifts = np.arange(b - 1, -1, -1)
    return ((ids[:, None] >> shifts) & 1).astype(np.uint8).reshape(-1)


def _header_field(entity_id: int | None) -> int:
    code = 0 if entity_id is None else int(entity_id)
    if not 0 <= code < (1 << 12):
        raise ConfigurationError(f"entity id {entity_id} does not fit the 12-bit header field")
    check = (code & 0xF) ^ ((code >> 4) & 0xF) ^ ((code >> 8) & 0xF) ^ _HEADER_SALT
    return (check << 12) | code


def _parse_header_field(field_value: int) -> tuple[int | None, bool]:
    code = field_value & 0xFFF
    check = (field_value >> 12) & 0xF
    expected = (code & 0xF) ^ ((code >> 4) & 0xF) ^ ((code >> 8) & 0xF) ^ _HEADER_SALT
    if check != expected:
        return None, True
    return (None, False) if code == 0 else (int(code), False)


def header_bits(entity_id: int | None) -> np.ndarray:
    value = _header_field(entity_id)
    bits = ((value >> np.arange(HEADER_FIELD_BITS - 1, -1, -1)) & 1).astype(np.uint8)
    return np.tile(bits, HEADER_REPEATS)


def parse_header_bits(bits: np.ndarray) -> tuple[int | None, bool]:
    """Majority-vote the repeated field, then verify its checksum nibble."""
    votes = bits[:HEADER_BITS].reshape(HEADER_REPEATS, HEADER_FIELD_BITS)
    majority = (votes.sum(axis=0) * 2 > HEADER_REPEATS).astype(np.uint8)
    weights = 1 << np.arange(HEADER_FIELD_BITS - 1, -1, -1)
    return _parse_header_field(int(majority @ weights))


# ---------------------------------------------------------------------------
# source quantizer


@dataclass(frozen=True)
class BlockQuantizer:
    """Uniform q-bit pixel quantizer with a reserved sentinel level, plus framing."""

    q: int = 5
    b: int = 8
    sentinel: SentinelSpec = field(default_factory=SentinelSpec)

    def __post_init__(self):
        if not 2 <= self.q <= 8:
            raise ConfigurationError("q must be in [2, 8]")
        if not 1 <= self.b <= 12:
            raise ConfigurationError("b must be in [1, 12]")
        # sentinel recovery is unambiguous only if the tolerance band clears
        # every content codeword by a factor of two
        min_dist = min(
            abs(float(c) - j / self.content_levels)
            for c in self.sentinel.color
            for j in range(1, self.content_levels + 1)
        )
        if self.sentinel.tolerance >= min_dist / 2.0:
            raise ConfigurationError(
                f"sentinel tolerance {self.sentinel.tolerance:g} is not below half the "
                f"minimum codeword distance {min_dist:g}")

    @property
    def content_levels(self) -> int:
        return (1 << self.q) - 1

    def payload_blocks(self, shape: tuple[int, int, int]) -> int:
        c, h, w = shape
        return -(-(c * h * w * self.q) // self.b)

    def header_blocks(self) -> int:
        return -(-HEADER_BITS // self.b)

    def total_blocks(self, shape: tuple[int, int, int]) -> int:
        return self.header_blocks() + self.payload_blocks(shape)

    def quantize_pixels(self, image: Image) -> np.ndarray:
        """(C, H, W) levels; sentinel pixels map to level 0 on every channel."""
        px = image.pixels
        color = self.sentinel.color[:, None, None]
        is_sentinel = (np.abs(px - color).max(axis=0) <= self.sentinel.tolerance)
        levels = np.floor(px * self.content_levels + 0.5).astype(np.int64)
        levels = np.clip(levels, 1, self.content_levels)
        levels[:, is_sentinel] = 0
        return levels.astype(np.uint8)

    def dequantize_pixels(self, levels: np.ndarray) -> Image:
        vals = levels.astype(np.float32) / self.content_levels
        color = self.sentinel.color.astype(np.float32)[:, None, None]
        out = np.where(levels == 0, np.broadcast_to(color, vals.shape), vals)
        return Image(out)

    def block_ids(self, masked: Image, entity_id: int | None) -> np.ndarray:
        levels = self.quantize_pixels(masked).reshape(-1)
        bits = np.concatenate([header_bits(entity_id), levels_to_bits(levels, self.q)])
        return bits_to_block_ids(bits, self.b)

    def quantize_source(self, masked: Image, entity_id: int | None) -> list[MessageClass]:
        return [MessageClass(int(i), self.b) for i in self.block_ids(masked, entity_id)]

    def reassemble(self, ids: np.ndarray, shape: tuple[int, int, int]
                   ) -> tuple[Image, int | None, bool]:
        """Invert block packing: returns (image, entity_id, header_warning)."""
        if len(ids) != self.total_blocks(shape):
            raise DimensionError(
                f"got {len(ids)} blocks, expected {self.total_blocks(shape)} for shape {shape}")
        bits = block_ids_to_bits(np.asarray(ids, dtype=np.int64), self.b)
        entity_id, warning = parse_header_bits(bits)
        c, h, w = shape
        n_payload_bits = c * h * w * self.q
        payload = bits[HEADER_BITS:HEADER_BITS + n_payload_bits]
        levels = bits_to_levels(payload, self.q).reshape(shape)
        return self.dequantize_pixels(levels), entity_id, warning


# ---------------------------------------------------------------------------
# learned block codec


class BlockEncoder(nn.Module):
    """Learned constellation: class id -> unit-average-power symbol vector."""

    def __init__(self, block_bits: int = 8, symbols_per_block: int | None = None):
        super().__init__()
        self.block_bits = block_bits
        self.n_classes = 1 << block_bits
        self.symbols_per_block = symbols_per_block or block_bits
        if self.symbols_per_block == block_bits:
            # antipodal bit map is a sane starting constellation
            ids = np.arange(self.n_classes)
            bits = ((ids[:, None] >> np.arange(block_bits - 1, -1, -1)) & 1)
            init = torch.from_numpy((1.0 - 2.0 * bits).astype(np.float32))
        else:
            g = torch.Generator().manual_seed(0)
            init = torch.randn(self.n_classes, self.symbols_per_block, generator=g)
        self.table = nn.Parameter(init)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return self.normalized_table()[ids]

    def normalized_table(self) -> torch.Tensor:
        t = self.table
        norm = t.norm(dim=1, keepdim=True).clamp_min(1e-12)
        return t / norm * np.sqrt(self.symbols_per_block)


class BlockDecoder(nn.Module):
    """MLP classifier over the 2**b message classes."""

    def __init__(self, block_bits: int = 8, symbols_per_block: int | None = None,
                 hidden: int = 256):
        super().__init__()
        self.block_bits = block_bits
        self.n_classes = 1 << block_bits
        self.symbols_per_block = symbols_per_block or block_bits
        self.net = nn.Sequential(
            nn.Linear(self.symbols_per_block, hidden),
            nn.ReLU(),
            nn.Linear(hidden, hidden),
            nn.ReLU(),
            nn.Linear(hidden, self.n_classes),
        )

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return self.net(y)


def encode(blocks, cfg: ChannelConfig, encoder: BlockEncoder) -> SymbolFrame:
    """Map message classes to a power-constrained symbol frame."""
    ids = _as_ids(blocks, encoder.block_bits)
    if ids.size == 0:
        raise ConfigurationError("cannot encode an empty block list")
    with torch.no_grad():
        x = encoder(torch.from_numpy(ids)).reshape(-1).numpy().astype(np.float32)
    frame_len = x.size
    p_max = cfg.p_max if cfg.p_max is not None else float(frame_len)
    energy = float(np.sum(x.astype(np.float64) ** 2))
    if energy > p_max:
        x = x * np.float32(np.sqrt(p_max / energy))
        energy = float(np.sum(x.astype(np.float64) ** 2))
    check_constraints(x, cfg)
    assert energy <= p_max * (1 + 1e-6), "frame energy exceeds p_max after scaling"
    return SymbolFrame(x, encoder.block_bits, encoder.symbols_per_block,
                       int(ids.size), cfg.snr_db)


def check_constraints(symbols: np.ndarray, cfg: ChannelConfig) -> None:
    """Power and SNR feasibility of one frame; raises instead of violating."""
    frame_len = symbols.size
    energy = float(np.sum(symbols.astype(np.float64) ** 2))
    p_max = cfg.p_max if cfg.p_max is not None else float(frame_len)
    if energy > p_max * (1 + 1e-6):
        raise ConfigurationError(f"frame energy {energy:g} exceeds p_max {p_max:g}")
    bandwidth = cfg.bandwidth_b if cfg.bandwidth_b is not None else float(frame_len)
    snr_at_receiver = cfg.gain**2 * energy / (bandwidth * cfg.noise_var)
    if snr_at_receiver < cfg.tau_thre * (1 - 1e-9):
        raise ConfigurationError(
            f"frame SNR {snr_at_receiver:g} falls below tau_thre {cfg.tau_thre:g}")


def transmit(frame: SymbolFrame, cfg: ChannelConfig, seed: int) -> SymbolFrame:
    """y = gain * x + n with i.i.d. Gaussian noise, deterministic under seed."""
    gen = torch_gen(seed)
    x = torch.from_numpy(frame.symbols)
    noise = torch.randn(x.shape, generator=gen) * np.sqrt(cfg.noise_var)
    y = (cfg.gain * x + noise).numpy().astype(np.float32)
    return SymbolFrame(y, frame.block_bits, frame.symbols_per_block,
                       frame.block_count, frame.snr_db)


@dataclass
class DecodeResult:
    image: Image
    entity_id: int | None
    header_warning: bool
    block_ids: np.ndarray


def decode(frame: SymbolFrame, cfg: ChannelConfig, decoder: BlockDecoder,
           quantizer: BlockQuantizer, image_shape: tuple[int, int, int]) -> DecodeResult:
    """Hard per-block classification, then bitstream reassembly."""
    y = frame.symbols.reshape(frame.block_count, frame.symbols_per_block) / cfg.gain
    with torch.no_grad():
        logits = decoder(torch.from_numpy(y))
        ids = logits.argmax(dim=1).numpy()
    image, entity_id, warning = quantizer.reassemble(ids, image_shape)
    return DecodeResult(image, entity_id, warning, ids)


def _as_ids(blocks, block_bits: int) -> np.ndarray:
    if isinstance(blocks, np.ndarray):
        return blocks.astype(np.int64)
    if len(blocks) and isinstance(blocks[0], MessageClass):
        if any(m.block_bits != block_bits for m in blocks):
            raise ConfigurationError("block bit width does not match the encoder")
        return np.array([m.class_id for m in blocks], dtype=np.int64)
    return np.asarray(blocks, dtype=np.int64)


# ---------------------------------------------------------------------------
# codec training


def train_codec(snr_grid_db: list[float], block_bits: int = 8,
                symbols_per_block: int | None = None, steps: int = 3000,
                batch: int = 512, lr: float = 2e-3, seed: int = 0,
                eval_blocks: int = 20000) -> tuple[BlockEncoder, BlockDecoder, dict]:
    """Cross-entropy training through the noisy channel at SNRs from the grid.

    After the main loop the codec is polished until the noiseless round trip
    is exact over all classes; failure to get there is reported, not raised.
    """
    torch.manual_seed(derive_seed(seed, "codec-init"))
    encoder = BlockEncoder(block_bits, symbols_per_block)
    decoder = BlockDecoder(block_bits, symbols_per_block)
    params = list(encoder.parameters()) + list(decoder.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    gen = torch_gen(seed, "codec-train")
    n_classes = encoder.n_classes
    sigmas = np.sqrt([1.0 / snr_db_to_linear(s) for s in snr_grid_db])

    losses = []
    for step in range(steps):
        ids = torch.randint(0, n_classes, (batch,), generator=gen)
        x = encoder(ids)
        pick = torch.randint(0, len(sigmas), (batch, 1), generator=gen)
        sigma = torch.from_numpy(sigmas.astype(np.float32))[pick]
        y = x + torch.randn(x.shape, generator=gen) * sigma
        loss = nn.functional.cross_entropy(decoder(y), ids)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 100 == 0 or step == steps - 1:
            losses.append({"step": step, "loss": float(loss.item())})

    # polish until the noiseless round trip is exact
    all_ids = torch.arange(n_classes)
    fixup_rounds = 0
    for _ in range(200):
        with torch.no_grad():
            wrong = int((decoder(encoder(all_ids)).argmax(1) != all_ids).sum())
        if wrong == 0:
            break
        fixup_rounds += 1
        loss = nn.functional.cross_entropy(decoder(encoder(all_ids)), all_ids)
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        noiseless_exact = bool((decoder(encoder(all_ids)).argmax(1) == all_ids).all())

    bler_curve = {}
    for snr in snr_grid_db:
        bler_curve[f"{snr:g}"] = block_error_rate(
            encoder, decoder, snr, eval_blocks, derive_seed(seed, "codec-eval", f"{snr:g}"))
    report = {
        "losses": losses,
        "steps": steps,
        "fixup_rounds": fixup_rounds,
        "noiseless_exact": noiseless_exact,
        "bler_by_snr_db": bler_curve,
        "failed": not noiseless_exact,
    }
    return encoder, decoder, report


def block_error_rate(encoder: BlockEncoder, decoder: BlockDecoder, snr_db: float,
                     n_blocks: int, seed: int) -> float:
    gen = torch_gen(seed)
    sigma = np.sqrt(1.0 / snr_db_to_linear(snr_db))
    errors = 0
    done = 0
    with torch.no_grad():
        while done < n_blocks:
            n = min(8192, n_blocks - done)
            ids = torch.randint(0, encoder.n_classes, (n,), generator=gen)
            y = encoder(ids) + torch.randn(n, encoder.symbols_per_block, generator=gen) * sigma
            errors += int((decoder(y).argmax(1) != ids).sum())
            done += n
    return errors / n_blocks


# ---------------------------------------------------------------------------
# frame wire format

_FRAME_HEADER = struct.Struct("<4sHHHIi")


def write_frame(frame: SymbolFrame, path: str | Path) -> None:
    header = _FRAME_HEADER.pack(
        FRAME_MAGIC, FRAME_VERSION, frame.block_bits, frame.symbols_per_block,
        frame.block_count, int(round(frame.snr_db * 100)))
    payload = frame.symbols.astype("<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_frame(path: str | Path) -> SymbolFrame:
    buf = Path(path).read_bytes()
    magic, version, b, n_c, count, snr_centi = _FRAME_HEADER.unpack_from(buf, 0)
    if magic != FRAME_MAGIC:
        raise VersionError(f"{path}: not a symbol frame file")
    if version != FRAME_VERSION:
        raise VersionError(f"{path}: unsupported frame version {version}")
    symbols = np.frombuffer(buf, dtype="<f4", offset=_FRAME_HEADER.size)
    return SymbolFrame(symbols.copy(), b, n_c, count, snr_centi / 100.0)
