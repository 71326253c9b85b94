"""Binary model file format.

Layout:

    bytes 0..5    magic ``SPON1``
    bytes 5..9    u32 little-endian JSON header length
    header        UTF-8 JSON: {"format_version", "config", "tensors"} where
                  tensors maps name -> {"shape", "offset", "length"}; offsets
                  are relative to the start of the blob region
    blob region   concatenated little-endian float32 buffers, manifest order
    trailer       u32 little-endian CRC32 of the blob region

Round-trips are bit-exact. Malformed headers, truncation and checksum
mismatches raise :class:`ModelFormatError` instead of crashing.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .model import SITE_KINDS, LayerWeights, LinearSite, ModelConfig, ModelWeights

MAGIC = b"SPON1"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """The file does not follow the model format."""


def save_model(weights: ModelWeights, config: ModelConfig, path: str | Path) -> None:
    named = weights.named_tensors()
    manifest: dict[str, dict] = {}
    blobs: list[bytes] = []
    offset = 0
    for name, arr in named.items():
        if arr.dtype != np.float32:
            raise ValueError(f"tensor {name!r} is {arr.dtype}, expected float32")
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest[name] = {"shape": list(arr.shape), "offset": offset, "length": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    # key order is meaningful: blobs are concatenated in manifest order
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "config": config.to_dict(), "tensors": manifest},
    ).encode("utf-8")
    blob = b"".join(blobs)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(blob)
        fh.write(struct.pack("<I", zlib.crc32(blob)))


def _read_header(fh) -> dict:
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    raw_len = fh.read(4)
    if len(raw_len) != 4:
        raise ModelFormatError("truncated file: missing header length")
    (header_len,) = struct.unpack("<I", raw_len)
    header = fh.read(header_len)
    if len(header) != header_len:
        raise ModelFormatError("truncated file: incomplete header")
    try:
        parsed = json.loads(header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"malformed header: {exc}") from exc
    if not isinstance(parsed, dict) or "tensors" not in parsed or "config" not in parsed:
        raise ModelFormatError("malformed header: missing config or tensor manifest")
    if parsed.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format_version {parsed.get('format_version')!r}")
    return parsed


def read_manifest(path: str | Path) -> dict:
    """Header JSON only (config plus tensor manifest), without the blobs."""
    with open(path, "rb") as fh:
        return _read_header(fh)


def load_model(path: str | Path) -> tuple[ModelWeights, ModelConfig]:
    with open(path, "rb") as fh:
        parsed = _read_header(fh)
        manifest = parsed["tensors"]
        blob_size = sum(entry["length"] for entry in manifest.values())
        blob = fh.read(blob_size)
        if len(blob) != blob_size:
            raise ModelFormatError("truncated file: incomplete blob region")
        raw_crc = fh.read(4)
        if len(raw_crc) != 4:
            raise ModelFormatError("truncated file: missing checksum")
    try:
        config = ModelConfig.from_dict(parsed["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed config: {exc}") from exc
    (stored_crc,) = struct.unpack("<I", raw_crc)
    if zlib.crc32(blob) != stored_crc:
        raise ModelFormatError("checksum mismatch in blob region")

    def tensor(name: str) -> np.ndarray:
        if name not in manifest:
            raise ModelFormatError(f"manifest is missing tensor {name!r}")
        entry = manifest[name]
        start, length = entry["offset"], entry["length"]
        if start < 0 or start + length > len(blob):
            raise ModelFormatError(f"tensor {name!r} extends past the blob region")
        arr = np.frombuffer(blob, dtype="<f4", count=length // 4, offset=start)
        return arr.reshape(entry["shape"]).astype(np.float32, copy=True)

    layers = [LayerWeights(
        **{kind: tensor(f"layers.{i}.{kind}.weight") for kind in SITE_KINDS},
        attn_norm_gain=tensor(f"layers.{i}.attn_norm.gain"),
        mlp_norm_gain=tensor(f"layers.{i}.mlp_norm.gain"),
    ) for i in range(config.n_layers)]

    biases: dict[LinearSite, np.ndarray] = {}
    for name in manifest:
        parts = name.split(".")
        if len(parts) == 4 and parts[0] == "layers" and parts[3] == "bias":
            site = LinearSite(int(parts[1]), parts[2]).validate(config.n_layers)
            biases[site] = tensor(name)

    weights = ModelWeights(
        token_embedding=tensor("token_embedding"),
        position_embedding=tensor("position_embedding"),
        layers=layers,
        final_norm_gain=tensor("final_norm.gain"),
        unembedding=tensor("unembedding"),
        biases=biases,
    )
    return weights, config
