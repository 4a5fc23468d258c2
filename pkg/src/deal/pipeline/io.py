"""On-disk formats: keypoint CSV, descriptor and checkpoint binaries, dataset JSON.

Every writer is deterministic, so write -> read -> write reproduces the same
bytes.  Readers raise :class:`InputError` with the file (and line, for text
formats) on anything malformed.
"""

from __future__ import annotations

import csv
import io
import json
import struct
import zlib
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import InputError
from ..geometry import Keypoint
from ..network import ArchConfig, ModelWeights
from ..simulator import PairSample

DESC_MAGIC = b"DEALDESC"
CKPT_MAGIC = b"DEALCKPT"
FORMAT_VERSION = 1
KEYPOINT_HEADER = ["x", "y", "size", "angle_rad"]
# The architecture config travels inside the checkpoint as a zero-element
# tensor whose name carries this prefix followed by the JSON text.
CONFIG_PREFIX = "__config__:"


# ---------------------------------------------------------------- keypoints


def write_keypoints(path, keypoints: Sequence[Keypoint]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(KEYPOINT_HEADER)
    for kp in keypoints:
        w.writerow([repr(float(kp.x)), repr(float(kp.y)), repr(float(kp.size)), repr(float(kp.orientation))])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_keypoints(path) -> list[Keypoint]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise InputError(f"{path}: cannot read keypoints ({exc})") from None
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or [c.strip() for c in rows[0]] != KEYPOINT_HEADER:
        raise InputError(f"{path}:1: expected header {','.join(KEYPOINT_HEADER)}")
    out = []
    for line, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 4:
            raise InputError(f"{path}:{line}: expected 4 fields, got {len(row)}")
        try:
            x, y, size, ang = (float(v) for v in row)
            out.append(Keypoint(x, y, size, ang))
        except (ValueError, InputError) as exc:
            raise InputError(f"{path}:{line}: {exc}") from None
    return out


# ---------------------------------------------------------------- descriptors


def write_descriptors(path, descriptors) -> None:
    arr = np.asarray(descriptors, dtype="<f4")
    if arr.ndim != 2:
        raise InputError(f"descriptors must be (count, dim), got {arr.shape}")
    header = DESC_MAGIC + struct.pack("<III", FORMAT_VERSION, arr.shape[0], arr.shape[1])
    Path(path).write_bytes(header + np.ascontiguousarray(arr).tobytes())


def read_descriptors(path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"{path}: cannot read descriptors ({exc})") from None
    if len(raw) < 20 or raw[:8] != DESC_MAGIC:
        raise InputError(f"{path}: not a descriptor file (bad magic)")
    version, count, dim = struct.unpack_from("<III", raw, 8)
    if version != FORMAT_VERSION:
        raise InputError(f"{path}: unsupported descriptor version {version}")
    if len(raw) != 20 + 4 * count * dim:
        raise InputError(f"{path}: payload holds {len(raw) - 20} bytes, expected {4 * count * dim}")
    return np.frombuffer(raw, dtype="<f4", offset=20).reshape(count, dim).astype(np.float32)


# ---------------------------------------------------------------- checkpoints


def checkpoint_bytes(weights: ModelWeights) -> bytes:
    tensors = [(CONFIG_PREFIX + weights.config.to_json(), np.zeros((0,), np.float32))]
    tensors += sorted(weights.named_arrays().items())
    parts = [CKPT_MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors:
        arr = np.asarray(arr, dtype="<f4")
        bname = name.encode("utf-8")
        if len(bname) > 0xFFFF or arr.ndim > 0xFF:
            raise InputError(f"tensor {name[:40]!r} cannot be stored")
        parts.append(struct.pack("<H", len(bname)) + bname)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def write_checkpoint(path, weights: ModelWeights) -> None:
    Path(path).write_bytes(checkpoint_bytes(weights))


def read_checkpoint(path) -> ModelWeights:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"{path}: cannot read checkpoint ({exc})") from None
    if len(raw) < 20 or raw[:8] != CKPT_MAGIC:
        raise InputError(f"{path}: not a checkpoint file (bad magic)")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise InputError(f"{path}: checkpoint CRC mismatch")
    version, count = struct.unpack_from("<II", body, 8)
    if version != FORMAT_VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    arrays: dict[str, np.ndarray] = {}
    config = None
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, off)
            name = body[off + 2:off + 2 + n].decode("utf-8")
            off += 2 + n
            (rank,) = struct.unpack_from("<B", body, off)
            dims = struct.unpack_from(f"<{rank}I", body, off + 1)
            off += 1 + 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if off + 4 * size > len(body):
                raise InputError(f"{path}: tensor {name!r} runs past the end of the file")
            arr = np.frombuffer(body, dtype="<f4", count=size, offset=off).reshape(dims)
            off += 4 * size
            if name.startswith(CONFIG_PREFIX):
                config = ArchConfig.from_json(name[len(CONFIG_PREFIX):])
            else:
                arrays[name] = arr.astype(np.float32)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, TypeError) as exc:
        raise InputError(f"{path}: malformed checkpoint ({exc})") from None
    if off != len(body):
        raise InputError(f"{path}: {len(body) - off} trailing bytes after the last tensor")
    if config is None:
        raise InputError(f"{path}: checkpoint carries no architecture config")
    return ModelWeights.from_named_arrays(config, arrays)


# ---------------------------------------------------------------- correspondences & manifests


def write_correspondences(path, corrs: Sequence[tuple[int, int, float]]) -> None:
    lines = [json.dumps({"ia": int(a), "ib": int(b), "dist_px": float(d)}) for a, b, d in corrs]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_correspondences(path) -> list[tuple[int, int, float]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"{path}: cannot read correspondences ({exc})") from None
    out = []
    for line, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
            out.append((int(obj["ia"]), int(obj["ib"]), float(obj["dist_px"])))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise InputError(f"{path}:{line}: bad correspondence record ({exc})") from None
    return out


def write_manifest(path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_manifest(path) -> dict:
    try:
        m = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"{path}: cannot read manifest ({exc})") from None
    if not isinstance(m, dict) or not isinstance(m.get("pairs"), list):
        raise InputError(f"{path}: manifest needs a 'pairs' list")
    keys = ("image_a", "image_b", "keypoints_a", "keypoints_b", "correspondences")
    for i, p in enumerate(m["pairs"]):
        missing = [k for k in keys if k not in p]
        if missing:
            raise InputError(f"{path}: pair {i} lacks {missing}")
    return m


# ---------------------------------------------------------------- images & pairs


def save_image(path, image) -> None:
    from PIL import Image

    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(np.asarray(arr, np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def load_image(path) -> np.ndarray:
    """RGB image as float32 in [0, 1]."""
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise InputError(f"{path}: cannot read image ({exc})") from None


def quantize(image) -> np.ndarray:
    """The float image a PNG round trip yields (what ``load_image`` returns)."""
    arr = np.clip(np.rint(np.asarray(image, np.float64) * 255.0), 0, 255)
    return arr.astype(np.float32) / 255.0


def write_pair(root, index: int, pair: PairSample, seed: int) -> dict:
    """Store one pair under ``root`` and return its manifest entry."""
    root = Path(root)
    stem = f"pair_{index:05d}"
    entry = {
        "image_a": f"{stem}_a.png",
        "image_b": f"{stem}_b.png",
        "keypoints_a": f"{stem}_a.kp",
        "keypoints_b": f"{stem}_b.kp",
        "correspondences": f"{stem}.jsonl",
        "seed": seed,
        "sim_config": pair.manifest.get("sim_config", {}),
    }
    for key in ("sweep", "value"):
        if key in pair.manifest:
            entry[key] = pair.manifest[key]
    save_image(root / entry["image_a"], pair.image_a)
    save_image(root / entry["image_b"], pair.image_b)
    write_keypoints(root / entry["keypoints_a"], pair.keypoints_a)
    write_keypoints(root / entry["keypoints_b"], pair.keypoints_b)
    write_correspondences(root / entry["correspondences"], pair.correspondences)
    return entry


def load_pair(entry: dict, root) -> PairSample:
    root = Path(root)
    return PairSample(
        load_image(root / entry["image_a"]),
        load_image(root / entry["image_b"]),
        read_keypoints(root / entry["keypoints_a"]),
        read_keypoints(root / entry["keypoints_b"]),
        read_correspondences(root / entry["correspondences"]),
        {k: entry[k] for k in ("seed", "sim_config", "sweep", "value") if k in entry},
    )


def load_dataset(manifest_path) -> tuple[dict, list[PairSample]]:
    m = read_manifest(manifest_path)
    root = Path(manifest_path).parent
    return m, [load_pair(e, root) for e in m["pairs"]]


def describe_file(image_path, keypoints_path, checkpoint_path, out_path) -> np.ndarray:
    """Describe the keypoints of one image file and write a descriptor file.

    Keypoints that cannot be described keep their row, filled with NaN.
    """
    from ..network import describe

    image = load_image(image_path)
    kps = read_keypoints(keypoints_path)
    weights = read_checkpoint(checkpoint_path)
    desc = describe(image, None, kps, weights).descriptors
    write_descriptors(out_path, desc)
    return desc
