"""Binary checkpoint and dataset formats.

Checkpoint (little-endian)::

    b"DEDE" | version u32 | kind_len u16 | kind utf-8 | entry_count u32
    entry*: name_len u16 | name utf-8 | dtype u8 | rank u8 | dims u32*rank | raw values
    checksum u64   (blake2b-64 of every preceding byte)

Dataset::

    b"DSET" | version u32 | N u32 | C u32 | H u32 | W u32
    labels u16*N (0xFFFF = unlabeled) | poison flags u8*N | pixels f32*N*C*H*W
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .data import ImageBatch
from .detector import DedeModel, build_dede, params_hash
from .nets import DedeArch, EncoderArch, PatchGrid, VictimEncoder
from .rng import Rng

CHECKPOINT_MAGIC = b"DEDE"
DATASET_MAGIC = b"DSET"
CHECKPOINT_VERSION = 1
DATASET_VERSION = 1
UNLABELED = 0xFFFF

DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3, np.dtype("u1"): 4}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}

KIND_ENCODER = "victim-encoder"
KIND_DEDE = "dede-model"


class FormatError(ValueError):
    """Corrupt magic, version, checksum or layout."""


class HashMismatch(ValueError):
    """A detector checkpoint was paired with a different victim encoder."""


def checksum64(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def encode_checkpoint(kind: str, entries: dict[str, np.ndarray]) -> bytes:
    kind_b = kind.encode("utf-8")
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<IH", CHECKPOINT_VERSION, len(kind_b)) + kind_b
    out += struct.pack("<I", len(entries))
    for name, arr in entries.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.kind != "u" else arr.dtype
        if dt not in DTYPE_CODES:
            raise FormatError(f"{name}: unsupported dtype {arr.dtype}")
        name_b = name.encode("utf-8")
        if len(name_b) > 0xFFFF or arr.ndim > 255:
            raise FormatError(f"{name}: name or rank too large")
        out += struct.pack("<H", len(name_b)) + name_b
        out += struct.pack("<BB", DTYPE_CODES[dt], arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=dt).tobytes()
    out += struct.pack("<Q", checksum64(bytes(out)))
    return bytes(out)


def decode_checkpoint(blob: bytes) -> tuple[str, dict[str, np.ndarray]]:
    if len(blob) < 4 + 4 + 2 + 4 + 8 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    body, (stored,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    if checksum64(body) != stored:
        raise FormatError("checkpoint checksum mismatch")
    pos = 4
    try:
        (version, kind_len) = struct.unpack_from("<IH", body, pos)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        pos += 6
        kind = body[pos : pos + kind_len].decode("utf-8")
        pos += kind_len
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        entries: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + name_len].decode("utf-8")
            pos += name_len
            code, rank = struct.unpack_from("<BB", body, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            dt = CODE_DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(body):
                raise FormatError(f"{name}: truncated payload")
            entries[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as err:
        raise FormatError(f"malformed checkpoint: {err}") from None
    if pos != len(body):
        raise FormatError("trailing bytes after last entry")
    return kind, entries


def save_checkpoint(path, kind: str, entries: dict[str, np.ndarray]) -> bytes:
    blob = encode_checkpoint(kind, entries)
    Path(path).write_bytes(blob)
    return blob


def load_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------- models


def _grid_entry(grid: PatchGrid) -> np.ndarray:
    return np.array([grid.channels, grid.height, grid.width, grid.patch], dtype="<i8")


def _meta_entry(meta: str | None) -> dict[str, np.ndarray]:
    return {} if meta is None else {"meta.run": np.frombuffer(meta.encode("utf-8"), dtype="u1")}


def _pop_meta(entries: dict[str, np.ndarray]) -> str | None:
    raw = entries.pop("meta.run", None)
    return None if raw is None else raw.tobytes().decode("utf-8")


def checkpoint_meta(path) -> str | None:
    """The run metadata (resolved config and seed, JSON) stored in a checkpoint, if any."""
    return _pop_meta(load_checkpoint(path)[1])


def encoder_entries(enc: VictimEncoder, meta: str | None = None) -> dict[str, np.ndarray]:
    a = enc.arch
    entries = {
        "config.grid": _grid_entry(enc.grid),
        "config.arch": np.array([a.depth, a.width, a.heads, a.embed_dim], dtype="<i8"),
    }
    entries.update(_meta_entry(meta))
    entries.update(enc.state_dict())
    return entries


def save_encoder(path, enc: VictimEncoder, meta: str | None = None) -> bytes:
    return save_checkpoint(path, KIND_ENCODER, encoder_entries(enc, meta))


def encoder_from_entries(entries: dict[str, np.ndarray]) -> VictimEncoder:
    _pop_meta(entries)
    grid = PatchGrid(*(int(v) for v in entries.pop("config.grid")))
    arch = EncoderArch(*(int(v) for v in entries.pop("config.arch")))
    dtype = entries["pos"].dtype
    enc = VictimEncoder(grid, arch, Rng(0), dtype)
    enc.load_state_dict(entries)
    enc.set_trainable(False)
    return enc


def load_encoder(path) -> VictimEncoder:
    kind, entries = load_checkpoint(path)
    if kind != KIND_ENCODER:
        raise FormatError(f"expected a {KIND_ENCODER} checkpoint, got {kind!r}")
    return encoder_from_entries(entries)


def dede_entries(model: DedeModel, meta: str | None = None) -> dict[str, np.ndarray]:
    a = model.arch
    entries = {
        "config.dede_arch": np.array([a.enc_depth, a.enc_width, a.dec_depth, a.dec_width, a.heads], dtype="<i8"),
        "tau": np.array(model.tau, dtype="<f8"),
        "alpha_train": np.array(model.alpha_train, dtype="<f8"),
        "train_loss_mean": np.array(model.train_loss_mean, dtype="<f8"),
        "victim_hash": np.frombuffer(bytes.fromhex(model.victim_hash), dtype="u1"),
    }
    entries.update(_meta_entry(meta))
    for name, p in model.named_parameters():
        entries[name] = p.data
    return entries


def save_dede(path, model: DedeModel, meta: str | None = None) -> bytes:
    return save_checkpoint(path, KIND_DEDE, dede_entries(model, meta))


def load_dede(path, victim: VictimEncoder) -> DedeModel:
    """Load a detector, refusing if it was trained against a different victim."""
    kind, entries = load_checkpoint(path)
    if kind != KIND_DEDE:
        raise FormatError(f"expected a {KIND_DEDE} checkpoint, got {kind!r}")
    _pop_meta(entries)
    stored = entries.pop("victim_hash").tobytes().hex()
    actual = params_hash(victim)
    if stored != actual:
        raise HashMismatch(f"detector was trained against victim {stored[:16]}..., got {actual[:16]}...")
    arch = DedeArch(*(int(v) for v in entries.pop("config.dede_arch")))
    tau = float(entries.pop("tau"))
    alpha = float(entries.pop("alpha_train"))
    mean = float(entries.pop("train_loss_mean"))
    model = build_dede(victim, arch, Rng(0), alpha, dtype=victim.dtype)
    named = dict(model.named_parameters())
    if set(named) != set(entries):
        raise FormatError("detector checkpoint parameters do not match its architecture")
    for name, p in named.items():
        if entries[name].shape != p.shape:
            raise FormatError(f"{name}: shape {entries[name].shape} vs {p.shape}")
        p.data = entries[name].astype(p.dtype)
        p.requires_grad = False
    model.tau, model.train_loss_mean = tau, mean
    return model


# --------------------------------------------------------------- datasets


def encode_dataset(batch: ImageBatch) -> bytes:
    n, c, h, w = batch.pixels.shape
    labels = np.where(batch.labels < 0, UNLABELED, batch.labels)
    if labels.max(initial=0) > UNLABELED:
        raise FormatError("labels exceed the 16-bit range")
    out = bytearray(DATASET_MAGIC)
    out += struct.pack("<5I", DATASET_VERSION, n, c, h, w)
    out += labels.astype("<u2").tobytes()
    out += batch.poisoned.astype("u1").tobytes()
    out += np.ascontiguousarray(batch.pixels, dtype="<f4").tobytes()
    return bytes(out)


def decode_dataset(blob: bytes, tag: str = "train") -> ImageBatch:
    if len(blob) < 24 or blob[:4] != DATASET_MAGIC:
        raise FormatError("not a dataset file (bad magic)")
    version, n, c, h, w = struct.unpack_from("<5I", blob, 4)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    pos = 24
    expected = pos + 2 * n + n + 4 * n * c * h * w
    if len(blob) != expected:
        raise FormatError(f"dataset size {len(blob)} != expected {expected}")
    labels = np.frombuffer(blob, "<u2", n, pos).astype(np.int64)
    labels[labels == UNLABELED] = -1
    pos += 2 * n
    flags = np.frombuffer(blob, "u1", n, pos)
    if flags.max(initial=0) > 1:
        raise FormatError("poison flags must be 0 or 1")
    pos += n
    pixels = np.frombuffer(blob, "<f4", n * c * h * w, pos).reshape(n, c, h, w).astype(np.float32)
    if n and (not np.isfinite(pixels).all() or pixels.min() < 0.0 or pixels.max() > 1.0):
        raise FormatError("pixel values outside [0, 1]")
    return ImageBatch(pixels, labels, flags.astype(bool), tag)


def save_dataset(path, batch: ImageBatch) -> bytes:
    blob = encode_dataset(batch)
    Path(path).write_bytes(blob)
    return blob


def load_dataset(path, tag: str = "train") -> ImageBatch:
    return decode_dataset(Path(path).read_bytes(), tag)
