"""File formats: atomic writes, frame CSV/PGM, PBM masks and binary checkpoints."""
import logging
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd

from errors import DomainError
from flow_match import PARAM_NAMES, DenoiserParams, LatentSequence

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"

CHECKPOINT_MAGIC = b"DFCK"
REWARD_MAGIC = b"DFRW"
FORMAT_VERSION = 1
FRAME_FORMATS = ("csv", "pgm")


# ------------------------------------------------------------
# Atomic writes
# ------------------------------------------------------------

def atomic_write_bytes(path, data):
    """Write to a temporary file next to path, then rename over it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path, text):
    return atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_csv(df, path, float_format=FLOAT_FORMAT):
    return atomic_write_text(path, df.to_csv(index=False, float_format=float_format, lineterminator="\n"))


# ------------------------------------------------------------
# Frames
# ------------------------------------------------------------

def frames_frame(seq):
    """LatentSequence as a DataFrame: one row per frame, columns d0..d{D-1}."""
    df = pd.DataFrame(seq.frames, columns=[f"d{k}" for k in range(seq.D)])
    if seq.per_frame_t is not None:
        df.insert(0, "noise_level", seq.per_frame_t)
    df.insert(0, "frame", np.arange(seq.F))
    return df


def write_frames_csv(seq, path):
    return atomic_write_csv(frames_frame(seq), path)


def read_frames_csv(path):
    df = pd.read_csv(path, float_precision="round_trip")
    cols = [c for c in df.columns if c.startswith("d") and c[1:].isdigit()]
    if not cols:
        raise DomainError(f"{path}: no frame columns")
    cols.sort(key=lambda c: int(c[1:]))
    per_frame_t = df["noise_level"].to_numpy() if "noise_level" in df.columns else None
    return LatentSequence(df[cols].to_numpy(dtype=np.float64), per_frame_t)


def pgm_bytes(image):
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + image.tobytes()


def frame_images(seq):
    """Per-frame grayscale images, min-max scaled over the whole sequence."""
    D = seq.D
    side = int(round(np.sqrt(D)))
    if side * side != D:
        raise DomainError(f"image output needs a square frame size, got D={D}")
    lo, hi = float(seq.frames.min()), float(seq.frames.max())
    if hi > lo:
        scaled = (seq.frames - lo) / (hi - lo)
    else:
        scaled = np.zeros_like(seq.frames)
    pixels = np.round(scaled * 255).astype(np.uint8)
    return [p.reshape(side, side) for p in pixels]


def emit_frames(seq, fmt, out_dir, prefix="frame"):
    """Write a sequence as one CSV or as one PGM per frame; returns the paths."""
    if fmt not in FRAME_FORMATS:
        raise DomainError(f"unknown frame format {fmt!r}; expected one of {FRAME_FORMATS}")
    out_dir = Path(out_dir)
    if fmt == "csv":
        return [write_frames_csv(seq, out_dir / f"{prefix}s.csv")]
    images = frame_images(seq)
    return [atomic_write_bytes(out_dir / f"{prefix}_{k:04d}.pgm", pgm_bytes(img))
            for k, img in enumerate(images)]


# ------------------------------------------------------------
# PBM masks
# ------------------------------------------------------------

def _pbm_tokens(data, count, pos):
    tokens = []
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DomainError("truncated PBM header")
        tokens.append(data[start:pos])
    return tokens, pos


def parse_pbm(data):
    """Mask from PBM bytes (P1 or P4). Black pixels (1) are detections, so mask = 1 - bit."""
    (magic, w, h), pos = _pbm_tokens(data, 3, 0)
    width, height = int(w), int(h)
    if magic == b"P4":
        pos += 1
        row_bytes = (width + 7) // 8
        raw = np.frombuffer(data, dtype=np.uint8, count=row_bytes * height, offset=pos)
        bits = np.unpackbits(raw.reshape(height, row_bytes), axis=1)[:, :width]
    elif magic == b"P1":
        digits = [c for c in data[pos:].decode("ascii") if c in "01"]
        if len(digits) < width * height:
            raise DomainError("truncated PBM raster")
        bits = np.array(digits[:width * height], dtype=np.uint8).reshape(height, width)
    else:
        raise DomainError(f"not a PBM file (magic {magic!r})")
    return (1 - bits).astype(np.uint8)


def read_pbm(path):
    return parse_pbm(Path(path).read_bytes())


def pbm_bytes(mask):
    mask = np.asarray(mask, dtype=np.uint8)
    h, w = mask.shape
    packed = np.packbits(1 - mask, axis=1)
    return f"P4\n{w} {h}\n".encode("ascii") + packed.tobytes()


# ------------------------------------------------------------
# Checkpoints
# ------------------------------------------------------------

def checkpoint_bytes(params, T):
    header = CHECKPOINT_MAGIC + struct.pack(
        "<H6I", FORMAT_VERSION, params.dim, params.max_frames, params.hidden,
        params.n_prompts, params.time_freqs, T)
    body = b"".join(np.ascontiguousarray(getattr(params, n), dtype="<f8").tobytes()
                    for n in PARAM_NAMES)
    return header + body


def save_checkpoint(params, path, T):
    atomic_write_bytes(path, checkpoint_bytes(params, T))
    logger.info("Saved checkpoint %s", path)
    return Path(path)


def _param_shapes(D, F, H, P, K):
    return {
        "w_in": (D, H), "b_in": (H,), "w_time": (2 * K, H), "pos": (F, H),
        "prompt": (P, H), "w_ctx": (D, H), "w_hid": (H, H), "b_hid": (H,),
        "w_out": (H, D), "b_out": (D,),
    }


def _read_arrays(data, offset, shapes, names):
    arrays = {}
    for name in names:
        shape = shapes[name]
        count = int(np.prod(shape))
        if offset + 8 * count > len(data):
            raise DomainError(f"file truncated while reading {name}")
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
    if offset != len(data):
        raise DomainError(f"{len(data) - offset} trailing bytes")
    return arrays


def load_checkpoint(path):
    """Returns (DenoiserParams, T)."""
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise DomainError(f"{path}: not a checkpoint")
    version, D, F, H, P, K, T = struct.unpack_from("<H6I", data, 4)
    if version != FORMAT_VERSION:
        raise DomainError(f"{path}: unsupported checkpoint version {version}")
    arrays = _read_arrays(data, 4 + struct.calcsize("<H6I"), _param_shapes(D, F, H, P, K), PARAM_NAMES)
    params = DenoiserParams(**arrays, time_freqs=K, meta={"timesteps": T})
    return params, T


def save_reward(params, path):
    from preference_opt import REWARD_PARAM_NAMES

    two_d, hidden = params.w1.shape
    header = REWARD_MAGIC + struct.pack("<H2IB", FORMAT_VERSION, two_d // 2, hidden, int(params.learn_tie))
    body = b"".join(np.ascontiguousarray(getattr(params, n), dtype="<f8").tobytes()
                    for n in REWARD_PARAM_NAMES)
    atomic_write_bytes(path, header + body)
    return Path(path)


def load_reward(path):
    from preference_opt import REWARD_PARAM_NAMES, RewardParams

    data = Path(path).read_bytes()
    if data[:4] != REWARD_MAGIC:
        raise DomainError(f"{path}: not a reward model")
    version, D, H, learn_tie = struct.unpack_from("<H2IB", data, 4)
    if version != FORMAT_VERSION:
        raise DomainError(f"{path}: unsupported reward version {version}")
    shapes = {"w1": (2 * D, H), "b1": (H,), "w2": (H,), "b2": (), "phi": ()}
    arrays = _read_arrays(data, 4 + struct.calcsize("<H2IB"), shapes, REWARD_PARAM_NAMES)
    return RewardParams(**arrays, learn_tie=bool(learn_tie))
