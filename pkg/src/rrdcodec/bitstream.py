"""Compressed file format and the compress / decompress pipeline.

File layout (all integers big-endian)::

    offset  size  field
    0       4     magic b"RDEI"
    4       1     format version (1)
    5       1     flags (bit 0: raw symbol mode, other bits zero)
    6       1     codebook index bit width, ceil(log2 V)
    7       1     reserved, zero
    8       2     image width before padding
    10      2     image height before padding
    12      8     model hash (first 8 bytes of SHA-256 over the checkpoint state)
    20      4     lambda_r of the model, IEEE float32
    24      2     step count L (informative default)
    26      4     guidance lambda_s, signed 16.16 fixed point (informative default)
    30      8     decode noise seed, unsigned
    38      4     VQ section length in bytes
    42      4     y section length in bytes
    46      4     CRC-32 of bytes 0..45
    50      ...   VQ section, then y section

Each section is a range-coder stream followed by an 8-byte checksum trailer
(see :mod:`rrdcodec.rangecoder`). The VQ section holds the codebook indices
in raster order under a uniform model. The y section holds the checkerboard
anchors of the quantised latent, then the remaining elements, each group in
(channel, row, column) order. Symbols are ``round(y - mu)`` coded with the
discretised Gaussian table of the smallest scale level >= sigma. In raw mode
every y symbol is instead written as two 16-bit uniform halves of
``symbol + 2**31``.
"""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import entropy
from .entropy import EntropyParams, anchor_mask
from .nets import RRDModel
from .rangecoder import CdfBank, CorruptStreamError, RangeDecoder, RangeEncoder, Uniform

MAGIC = b"RDEI"
VERSION = 1
FLAG_RAW = 0x01
_HEAD = struct.Struct(">4sBBBBHH8sfHiQII")
HEADER_SIZE = _HEAD.size + 4
FIXED_ONE = 1 << 16

SCALE_LEVELS = 256
SCALE_MIN, SCALE_MAX = entropy.SIGMA_MIN, 64.0
SCALES = np.exp(np.linspace(math.log(SCALE_MIN), math.log(SCALE_MAX), SCALE_LEVELS))


class BitstreamError(ValueError):
    """Malformed header, unsupported version or incompatible model."""


@dataclass(frozen=True)
class Header:
    width: int
    height: int
    model_hash: bytes
    lambda_r: float
    L: int
    lambda_s: float
    seed: int
    index_bits: int
    vq_bytes: int = 0
    y_bytes: int = 0
    raw: bool = False
    version: int = VERSION

    def pack(self) -> bytes:
        if not (1 <= self.width <= 0xFFFF and 1 <= self.height <= 0xFFFF):
            raise BitstreamError(f"image size {self.width}x{self.height} outside 1..65535")
        fixed = round(self.lambda_s * FIXED_ONE)
        if not -(1 << 31) <= fixed < (1 << 31):
            raise BitstreamError("lambda_s outside the 16.16 fixed-point range")
        body = _HEAD.pack(
            MAGIC, self.version, FLAG_RAW if self.raw else 0, self.index_bits, 0,
            self.width, self.height, self.model_hash, self.lambda_r, self.L, fixed,
            self.seed & 0xFFFFFFFFFFFFFFFF, self.vq_bytes, self.y_bytes,
        )
        return body + struct.pack(">I", zlib.crc32(body))

    @classmethod
    def unpack(cls, data: bytes) -> "Header":
        if len(data) < HEADER_SIZE:
            raise BitstreamError("file shorter than the header")
        if data[:4] != MAGIC:
            raise BitstreamError("bad magic, not an RDEI bitstream")
        if data[4] != VERSION:
            raise BitstreamError(f"unsupported bitstream version {data[4]}")
        body = data[: _HEAD.size]
        (crc,) = struct.unpack(">I", data[_HEAD.size : HEADER_SIZE])
        if zlib.crc32(body) != crc:
            raise CorruptStreamError("header checksum mismatch")
        (_, version, flags, index_bits, _, w, h, mhash, lam_r, L, fixed, seed, vq_len, y_len) = _HEAD.unpack(body)
        if flags & ~FLAG_RAW:
            raise BitstreamError(f"unknown flags {flags:#x}")
        return cls(w, h, mhash, lam_r, L, fixed / FIXED_ONE, seed, index_bits, vq_len, y_len,
                   bool(flags & FLAG_RAW), version)

    @property
    def total_bytes(self) -> int:
        return HEADER_SIZE + self.vq_bytes + self.y_bytes

    @property
    def bpp(self) -> float:
        return 8.0 * self.total_bytes / (self.width * self.height)


def padded_size(h: int, w: int, factor: int) -> tuple[int, int]:
    return -(-h // factor) * factor, -(-w // factor) * factor


def pad_image(x: np.ndarray, factor: int) -> np.ndarray:
    """Reflect-pad a (C, H, W) image on the bottom/right to multiples of ``factor``."""
    h, w = x.shape[-2:]
    ph, pw = padded_size(h, w, factor)
    if (ph, pw) == (h, w):
        return x
    return np.pad(x, ((0, 0), (0, ph - h), (0, pw - w)), mode="reflect")


def scale_index(sigma: np.ndarray) -> np.ndarray:
    """Index of the smallest scale level >= sigma (clamped to the top level)."""
    sigma = np.nan_to_num(np.asarray(sigma, dtype=np.float64), nan=SCALE_MAX, posinf=SCALE_MAX)
    return np.minimum(np.searchsorted(SCALES, sigma, side="left"), SCALE_LEVELS - 1)


_BANK: CdfBank | None = None


def scale_bank() -> CdfBank:
    """Zero-mean tables for every scale level (symbols are residuals about mu)."""
    global _BANK
    if _BANK is None:
        _BANK = CdfBank.from_gaussians(np.zeros(SCALE_LEVELS), SCALES)
    return _BANK


@dataclass
class LatentCode:
    """Everything the decoder recovers before diffusion."""

    indices: np.ndarray  # (side_h * side_w,) codebook indices
    symbols: np.ndarray  # (M, yh, yw) integer residuals
    y_hat: torch.Tensor  # (1, M, yh, yw)
    params: EntropyParams
    c: torch.Tensor
    z_c: torch.Tensor


def _latent_dims(model: RRDModel, height: int, width: int):
    f = model.cfg.factor
    ph, pw = padded_size(height, width, f)
    lh, lw = ph // f, pw // f
    yh, yw = -(-lh // 2), -(-lw // 2)
    return (lh, lw), (yh, yw), (-(-yh // 2), -(-yw // 2))


class _ParamsReplay:
    """Shared by encoder and decoder so both run exactly the same arithmetic."""

    def __init__(self, model: RRDModel, indices: torch.Tensor, y_shape):
        cd = model.codec
        side = (1, model.cfg.side_channels, -(-y_shape[-2] // 2), -(-y_shape[-1] // 2))
        l_hat = cd.codebook.gather(indices, side)
        self.hyper = cd.hyper(l_hat, y_shape[-2:])
        self.mask = anchor_mask(*y_shape[-2:])
        self.codec = cd
        self.y_shape = y_shape

    def anchors(self) -> EntropyParams:
        return self.codec.entropy_params(torch.zeros(self.y_shape), self.hyper)

    def rest(self, y_anchor) -> EntropyParams:
        return self.codec.entropy_params(y_anchor, self.hyper)


@torch.no_grad()
def encode_latent(model: RRDModel, x: np.ndarray):
    """Pad, encode and quantise one (3, H, W) image. Returns (LatentCode, z0)."""
    model.eval()
    xp = torch.from_numpy(np.ascontiguousarray(pad_image(np.asarray(x, np.float32), model.cfg.factor)))[None]
    z0 = model.ae.encode_image(xp)
    cd = model.codec
    y = cd.analysis(z0)
    idx, _ = cd.codebook.lookup(cd.h_a(y))
    replay = _ParamsReplay(model, idx, tuple(y.shape))
    a = replay.mask
    p1 = replay.anchors()
    s1 = entropy.symbols_of(y, p1.mu) * a.long()
    y_anchor = (p1.mu + s1) * a
    p2 = replay.rest(y_anchor)
    s2 = entropy.symbols_of(y, p2.mu) * (1 - a).long()
    y_hat = y_anchor + (p2.mu + s2) * (1 - a)
    params = EntropyParams(torch.where(a.bool(), p1.mu, p2.mu), torch.where(a.bool(), p1.sigma, p2.sigma))
    c, z_c = cd.synthesis(y_hat, z0.shape[-2:])
    code = LatentCode(idx.numpy(), (s1 + s2)[0].numpy(), y_hat, params, c, z_c)
    return code, z0


def _write_y(enc: RangeEncoder, symbols: np.ndarray, sigma: np.ndarray, raw: bool):
    if raw:
        biased = symbols.astype(np.int64) + (1 << 31)
        halves = np.stack([biased >> 16, biased & 0xFFFF], axis=1).ravel()
        enc.encode_uniform(halves, Uniform(1 << 16))
    else:
        enc.encode(symbols, (scale_bank(), scale_index(sigma)))


def _read_y(dec: RangeDecoder, count: int, sigma: np.ndarray, raw: bool) -> np.ndarray:
    if raw:
        halves = dec.decode_uniform(2 * count, Uniform(1 << 16)).reshape(-1, 2)
        return (halves[:, 0] << 16 | halves[:, 1]) - (1 << 31)
    return dec.decode(count, (scale_bank(), scale_index(sigma)))


def compress_array(x: np.ndarray, model: RRDModel, *, L: int = 2, lambda_s: float = 1.0,
                   seed: int = 0, lambda_r: float = float("nan"), raw: bool = False) -> bytes:
    """Encode a float (3, H, W) image in [0, 1] into a complete bitstream."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3 or x.shape[0] != model.cfg.image_channels:
        raise ValueError(f"expected a ({model.cfg.image_channels}, H, W) image, got {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("non-finite pixels")
    code, _ = encode_latent(model, x)
    a = anchor_mask(*code.y_hat.shape[-2:])[0, 0].bool().numpy()
    sym = code.symbols
    sigma = code.params.sigma[0].numpy()

    vq = RangeEncoder()
    vq.encode_uniform(code.indices, Uniform(model.codec.codebook.size))
    vq_bytes = vq.finish()

    ye = RangeEncoder()
    for part in (a, ~a):
        sel = np.broadcast_to(part, sym.shape)
        _write_y(ye, sym[sel], sigma[sel], raw)
    y_bytes = ye.finish()

    header = Header(
        width=x.shape[-1], height=x.shape[-2], model_hash=model.model_hash(), lambda_r=lambda_r,
        L=L, lambda_s=lambda_s, seed=seed, index_bits=model.codec.codebook.index_bits,
        vq_bytes=len(vq_bytes), y_bytes=len(y_bytes), raw=raw,
    )
    return header.pack() + vq_bytes + y_bytes


def read_header(data: bytes, model: RRDModel | None = None) -> Header:
    header = Header.unpack(data)
    if len(data) != header.total_bytes:
        raise CorruptStreamError(f"file is {len(data)} bytes, header describes {header.total_bytes}")
    if model is not None:
        if header.model_hash != model.model_hash():
            raise BitstreamError("bitstream was written with a different model")
        if header.index_bits != model.codec.codebook.index_bits:
            raise BitstreamError("codebook index width does not match the model")
    return header


@torch.no_grad()
def decode_latent_code(data: bytes, model: RRDModel) -> tuple[Header, LatentCode]:
    """Parse and entropy-decode a bitstream up to (c, z_c); checksums verified."""
    model.eval()
    header = read_header(data, model)
    _, (yh, yw), (sh, sw) = _latent_dims(model, header.height, header.width)
    M = model.cfg.y_channels
    vq_data = data[HEADER_SIZE : HEADER_SIZE + header.vq_bytes]
    y_data = data[HEADER_SIZE + header.vq_bytes :]
    try:
        dec = RangeDecoder(vq_data)
        idx = dec.decode_uniform(sh * sw, Uniform(model.codec.codebook.size))
        dec.verify()
        idx_t = torch.from_numpy(idx)

        replay = _ParamsReplay(model, idx_t, (1, M, yh, yw))
        a = replay.mask
        a_np = a[0, 0].bool().numpy()
        sel_a = np.broadcast_to(a_np, (M, yh, yw))
        sel_n = ~sel_a
        dec = RangeDecoder(y_data)
        sym = np.zeros((M, yh, yw), dtype=np.int64)

        p1 = replay.anchors()
        sym[sel_a] = _read_y(dec, int(sel_a.sum()), p1.sigma[0].numpy()[sel_a], header.raw)
        s1 = torch.from_numpy(sym)[None] * a.long()
        y_anchor = (p1.mu + s1) * a
        p2 = replay.rest(y_anchor)
        sym[sel_n] = _read_y(dec, int(sel_n.sum()), p2.sigma[0].numpy()[sel_n], header.raw)
        dec.verify()
    except CorruptStreamError:
        raise
    except Exception as exc:  # garbage symbols can break the arithmetic downstream
        raise CorruptStreamError(f"payload failed to decode: {exc}") from exc

    s2 = torch.from_numpy(sym)[None] * (1 - a).long()
    y_hat = y_anchor + (p2.mu + s2) * (1 - a)
    params = EntropyParams(torch.where(a.bool(), p1.mu, p2.mu), torch.where(a.bool(), p1.sigma, p2.sigma))
    lh, lw = _latent_dims(model, header.height, header.width)[0]
    c, z_c = model.codec.synthesis(y_hat, (lh, lw))
    return header, LatentCode(idx, sym, y_hat, params, c, z_c)


@torch.no_grad()
def decompress_array(data: bytes, model: RRDModel, *, L: int | None = None,
                     lambda_s: float | None = None, return_code: bool = False):
    """Decode a bitstream to a float (3, H, W) image; L and lambda_s override the header."""
    header, code = decode_latent_code(data, model)
    L = header.L if L is None else int(L)
    if not 1 <= L <= model.horizon:
        raise ValueError(f"step count {L} outside [1, {model.horizon}]")
    s = header.lambda_s if lambda_s is None else float(lambda_s)
    z0_hat = model.sample(code.z_c, code.c, L, s, seed=header.seed)
    x = model.ae.decode_latent(z0_hat)[0, :, : header.height, : header.width].numpy()
    return (x, header, code) if return_code else x


def bit_allocation(code: LatentCode) -> np.ndarray:
    """Estimated bits per latent position, summed over channels: (yh, yw)."""
    return entropy.element_bits(code.y_hat, code.params)[0].sum(0).numpy()


def compress(in_path, out_path, model: RRDModel, **kw) -> Header:
    from .data import load_image

    data = compress_array(load_image(in_path), model, **kw)
    Path(out_path).write_bytes(data)
    return Header.unpack(data)


def decompress(in_path, out_path, model: RRDModel, **kw) -> Header:
    from .data import save_image

    x, header, _ = decompress_array(Path(in_path).read_bytes(), model, return_code=True, **kw)
    save_image(x, out_path)
    return header


__all__ = [
    "MAGIC", "VERSION", "HEADER_SIZE", "SCALES", "Header", "LatentCode", "BitstreamError",
    "CorruptStreamError", "pad_image", "padded_size", "scale_index", "scale_bank", "encode_latent",
    "compress_array", "decompress_array", "decode_latent_code", "read_header", "bit_allocation",
    "compress", "decompress",
]
