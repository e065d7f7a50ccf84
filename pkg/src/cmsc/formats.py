"""Bit-exact file formats and sample extraction.

BSEQ (boundary sequences)
    magic ``BSEQ`` | version byte 1 | u32 n_frames, height, width (LE) |
    dtype byte (0 = u8 scaled by 255, 1 = float32 LE) | frame-major
    row-major payload. dtype 1 round-trips bitwise; dtype 0 quantizes to
    1/255 steps and keeps binary datasets four times smaller.

CMSCKPT1 (model checkpoints)
    magic ``CMSCKPT1`` | u32 header length (LE) | UTF-8 JSON header with
    the model configuration, the training step count and one
    (name, shape, offset) record per parameter | float32 LE payload.
    Offsets are relative to the payload start.

Trail images are written as binary portable graymaps (``P5``).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .model import CmscConfig, build_model, level_specs
from .tensor import SeededRng, Tensor

BSEQ_MAGIC = b"BSEQ"
CKPT_MAGIC = b"CMSCKPT1"


class FormatError(ValueError):
    """Raised when encoded bytes cannot be decoded safely."""


def write_bseq(frames, dtype=1):
    """Encode a (L, H, W) float stack with values in [0, 1]."""
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 3:
        raise FormatError(f"expected (L, H, W) frames, got shape {frames.shape}")
    if frames.size and (frames.min() < 0.0 or frames.max() > 1.0):
        raise FormatError("frame values must lie in [0, 1]")
    if dtype not in (0, 1):
        raise FormatError(f"unknown dtype code {dtype}")
    n, h, w = frames.shape
    header = BSEQ_MAGIC + bytes([1]) + struct.pack("<III", n, h, w) + bytes([dtype])
    if dtype == 0:
        payload = np.round(frames * 255.0).astype(np.uint8).tobytes()
    else:
        payload = frames.astype("<f4").tobytes()
    return header + payload


def read_bseq(data):
    """Decode bytes produced by write_bseq into a float32 (L, H, W) stack."""
    if len(data) < 18:
        raise FormatError("truncated header")
    if data[:4] != BSEQ_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}")
    if data[4] != 1:
        raise FormatError(f"unsupported version {data[4]}")
    n, h, w = struct.unpack("<III", data[5:17])
    dtype = data[17]
    if dtype not in (0, 1):
        raise FormatError(f"unknown dtype code {dtype}")
    item = 1 if dtype == 0 else 4
    expected = 18 + n * h * w * item
    if len(data) != expected:
        raise FormatError(f"payload length {len(data) - 18}, expected {expected - 18}")
    raw = data[18:]
    if dtype == 0:
        frames = np.frombuffer(raw, dtype=np.uint8).astype(np.float32) / 255.0
    else:
        frames = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    frames = frames.reshape(n, h, w)
    if frames.size and (frames.min() < 0.0 or frames.max() > 1.0):
        raise FormatError("decoded values outside [0, 1]")
    return frames


def save_bseq(path, frames, dtype=1):
    with open(path, "wb") as f:
        f.write(write_bseq(frames, dtype=dtype))


def load_bseq(path):
    with open(path, "rb") as f:
        return read_bseq(f.read())


def save_checkpoint(params, config, step=0):
    """Serialize parameters and configuration; round-trips bitwise."""
    records = []
    offset = 0
    blobs = []
    for name, p in params.items():
        blob = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        records.append({"name": name, "shape": list(p.data.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"config": config.to_dict(), "step": int(step), "params": records},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    return CKPT_MAGIC + struct.pack("<I", len(header)) + header + b"".join(blobs)


def load_checkpoint(data):
    """Decode checkpoint bytes -> (params dict, CmscConfig, step)."""
    if len(data) < 12:
        raise FormatError("truncated checkpoint")
    if data[:8] != CKPT_MAGIC:
        raise FormatError(f"bad magic {data[:8]!r}")
    (hlen,) = struct.unpack("<I", data[8:12])
    if len(data) < 12 + hlen:
        raise FormatError("truncated checkpoint header")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
        config = CmscConfig.from_dict(header["config"])
        step = int(header["step"])
        records = header["params"]
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"corrupt checkpoint header: {e}") from e
    payload = data[12 + hlen:]
    params = {}
    seen_spans = []
    for rec in records:
        shape = tuple(int(s) for s in rec["shape"])
        size = int(np.prod(shape)) * 4
        off = int(rec["offset"])
        if off < 0 or off + size > len(payload):
            raise FormatError(f"parameter {rec['name']!r} payload out of bounds")
        for a, b in seen_spans:
            if off < b and a < off + size:
                raise FormatError(f"parameter {rec['name']!r} overlaps another")
        seen_spans.append((off, off + size))
        arr = np.frombuffer(payload[off:off + size], dtype="<f4").reshape(shape).copy()
        params[rec["name"]] = Tensor(arr, requires_grad=True, name=rec["name"])
    return params, config, step


def save_checkpoint_file(path, params, config, step=0):
    with open(path, "wb") as f:
        f.write(save_checkpoint(params, config, step=step))


def load_checkpoint_file(path):
    with open(path, "rb") as f:
        return load_checkpoint(f.read())


def check_architecture(params, config):
    """Verify loaded parameters fit ``config``; names the first mismatch."""
    expected = build_model(config, SeededRng(0))
    for name, ref in expected.items():
        if name not in params:
            raise FormatError(f"checkpoint is missing parameter {name!r}")
        if params[name].data.shape != ref.data.shape:
            raise FormatError(
                f"parameter {name!r} has shape {params[name].data.shape}, "
                f"expected {ref.data.shape}"
            )
    extra = set(params) - set(expected)
    if extra:
        raise FormatError(f"checkpoint has unexpected parameter {sorted(extra)[0]!r}")


@dataclass
class PatchSample:
    """One training example cut from a sequence.

    ``inputs`` holds the n context windows ending at frame ``t`` (oldest
    first), zero-filled where the window leaves the image. ``target`` is
    the central patch of frame t+1 and ``target_context`` the full context
    window of frame t+1 (needed to supervise the coarser levels).
    """

    inputs: np.ndarray
    target: np.ndarray
    target_context: np.ndarray
    t: int
    row: int
    col: int


def cut_context(frame, row, col, patch, context):
    """Zero-padded context window centered on grid cell (row, col)."""
    h, w = frame.shape
    margin = (context - patch) // 2
    top, left = row * patch - margin, col * patch - margin
    out = np.zeros((context, context), dtype=frame.dtype)
    y0, y1 = max(0, top), min(h, top + context)
    x0, x1 = max(0, left), min(w, left + context)
    if y1 > y0 and x1 > x0:
        out[y0 - top:y1 - top, x0 - left:x1 - left] = frame[y0:y1, x0:x1]
    return out


def grid_shape(frame_shape, patch):
    h, w = frame_shape
    if h % patch or w % patch:
        raise FormatError(f"frame {h}x{w} not divisible by patch {patch}")
    return h // patch, w // patch


def extract_patch_samples(frames, patch, n_frames, context):
    """All (context window, next-frame target) pairs of a sequence.

    For every time index with n observed frames and a successor, one
    sample per grid cell; sequences shorter than n+1 give none. Sample
    count is (L - n) * (H/patch) * (W/patch).
    """
    frames = np.asarray(frames, dtype=np.float32)
    rows, cols = grid_shape(frames.shape[1:], patch)
    samples = []
    for t in range(n_frames - 1, len(frames) - 1):
        for row in range(rows):
            for col in range(cols):
                window = np.stack(
                    [cut_context(frames[k], row, col, patch, context)
                     for k in range(t - n_frames + 1, t + 1)]
                )
                tgt_ctx = cut_context(frames[t + 1], row, col, patch, context)
                margin = (context - patch) // 2
                target = tgt_ctx[margin:margin + patch, margin:margin + patch]
                samples.append(
                    PatchSample(window, target.copy(), tgt_ctx, t=t, row=row, col=col)
                )
    return samples


def encode_trail(frames):
    """Superimpose frames by per-pixel max and encode as a binary PGM."""
    frames = [np.asarray(f) for f in frames]
    if not frames:
        raise FormatError("need at least one frame")
    shape = frames[0].shape
    if any(f.shape != shape for f in frames):
        raise FormatError("mixed frame sizes")
    trail = frames[0].astype(np.float32)
    for f in frames[1:]:
        trail = np.maximum(trail, f.astype(np.float32))
    gray = np.round(np.clip(trail, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + gray.tobytes()
