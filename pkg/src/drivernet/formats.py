"""On-disk formats: CTB1 tensors, feature JSON-lines, dataset manifests, checkpoints.

CTB1 layout: ``b"CTB1"``, u8 rank, rank x u64 LE extents, then f64 LE payload.
A checkpoint is one compact JSON header line followed by concatenated CTB1
records; manifest offsets count from the first byte after the newline.
"""

from __future__ import annotations

import io
import json
import math
import struct
from pathlib import Path

import numpy as np

from .feature import FeatureStreams, NormStats
from .synth import FPS, LABEL_NAMES, LABEL_VALUES, ClipSample, Dataset, synthesize

MAGIC = b"CTB1"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# CTB1


def encode_ctb(array: np.ndarray) -> bytes:
    a = np.asarray(array, dtype="<f8", order="C")
    if a.ndim > 255:
        raise FormatError("rank above 255 cannot be encoded")
    head = MAGIC + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes()


def decode_ctb(buf, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one record at ``offset``; returns the array and the offset past it."""
    mv = memoryview(buf)
    if bytes(mv[offset : offset + 4]) != MAGIC:
        raise FormatError(f"bad CTB1 magic at byte {offset}")
    (rank,) = struct.unpack_from("<B", mv, offset + 4)
    shape = struct.unpack_from(f"<{rank}Q", mv, offset + 5)
    start = offset + 5 + 8 * rank
    count = math.prod(shape)
    end = start + 8 * count
    if end > len(mv):
        raise FormatError("CTB1 payload truncated")
    data = np.frombuffer(mv[start:end], dtype="<f8").reshape(shape).astype(np.float64)
    return data, end


def write_ctb(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_ctb(array))


def read_ctb(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    data, end = decode_ctb(buf)
    if end != len(buf):
        raise FormatError(f"{path}: trailing bytes after CTB1 record")
    return data


# ---------------------------------------------------------------------------
# feature JSON-lines


def _floats(values) -> list[float]:
    # repr of a Python float is the shortest string that round-trips exactly
    return [float(v) for v in values]


def streams_to_jsonl(streams: FeatureStreams) -> str:
    lines = []
    valid = streams.valid if streams.valid is not None else np.ones(streams.n_frames, bool)
    for t in range(streams.n_frames):
        objs = [] if streams.objects is None else np.asarray(streams.objects[t]).reshape(-1, 4)
        rec = {
            "t": t,
            "head": _floats(streams.head_angles[t]),
            "body": _floats(streams.body_pose[t]),
            "hands": {"left": _floats(streams.hand_boxes[t, :4]),
                      "right": _floats(streams.hand_boxes[t, 4:])},
            "objects": [_floats(o) for o in objs],
            "valid": bool(valid[t]),
        }
        lines.append(json.dumps(rec, separators=(",", ":")))
    return "\n".join(lines) + "\n"


def _vector(rec: dict, key: str, n: int, lineno: int, where: str | None = None):
    value = rec.get(key) if where is None else rec.get(where, {}).get(key)
    label = key if where is None else f"{where}.{key}"
    if value is None:
        return None
    if not isinstance(value, list) or len(value) != n:
        got = len(value) if isinstance(value, list) else type(value).__name__
        raise FormatError(f"line {lineno}: field '{label}' must be a list of {n} numbers, got {got}")
    try:
        out = np.array([float(v) for v in value])
    except (TypeError, ValueError):
        raise FormatError(f"line {lineno}: field '{label}' holds a non-number") from None
    if not np.all(np.isfinite(out)):
        raise FormatError(f"line {lineno}: field '{label}' holds a non-finite value")
    return out


def streams_from_jsonl(text: str) -> FeatureStreams:
    """Parse per-frame records. Frames with ``valid: false`` may omit fields; those
    repeat the previous frame's values (the validity bit is kept, not modelled)."""
    head, body, hands, objects, valid = [], [], [], [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise FormatError(f"line {lineno}: invalid JSON ({e.msg})") from None
        if not isinstance(rec, dict):
            raise FormatError(f"line {lineno}: record must be an object")
        if rec.get("t") != len(head):
            raise FormatError(f"line {lineno}: field 't' must be {len(head)}, got {rec.get('t')!r}")
        ok = rec.get("valid", True)
        if not isinstance(ok, bool):
            raise FormatError(f"line {lineno}: field 'valid' must be a boolean")
        h = _vector(rec, "head", 3, lineno)
        b = _vector(rec, "body", 34, lineno)
        left = _vector(rec, "left", 4, lineno, where="hands")
        right = _vector(rec, "right", 4, lineno, where="hands")
        parts = [h, b, left, right]
        if any(p is None for p in parts):
            if ok:
                raise FormatError(f"line {lineno}: a valid frame needs head, body and both hands")
            if not head:
                raise FormatError(f"line {lineno}: the first frame cannot be missing detections")
            h = h if h is not None else head[-1]
            b = b if b is not None else body[-1]
            left = left if left is not None else hands[-1][:4]
            right = right if right is not None else hands[-1][4:]
        objs = rec.get("objects", [])
        if not isinstance(objs, list):
            raise FormatError(f"line {lineno}: field 'objects' must be a list")
        arr = np.zeros((len(objs), 2, 2))
        for i, o in enumerate(objs):
            if not isinstance(o, list) or len(o) != 4:
                raise FormatError(f"line {lineno}: field 'objects[{i}]' must be 4 numbers")
            arr[i] = np.array([float(v) for v in o]).reshape(2, 2)
        head.append(h)
        body.append(b)
        hands.append(np.concatenate([left, right]))
        objects.append(arr)
        valid.append(ok)
    if not head:
        raise FormatError("feature file holds no frames")
    return FeatureStreams(np.array(head), np.array(body), np.array(hands),
                          objects=objects, valid=np.array(valid))


def write_features(path, streams: FeatureStreams) -> None:
    Path(path).write_text(streams_to_jsonl(streams))


def read_features(path) -> FeatureStreams:
    return streams_from_jsonl(Path(path).read_text())


# ---------------------------------------------------------------------------
# datasets on disk


def clip_manifest(sample: ClipSample) -> dict:
    return {
        "clip_id": sample.clip_id,
        "fps": sample.fps,
        "n_frames": sample.n_frames,
        "label": LABEL_NAMES[sample.label],
        "files": {"frames": f"clips/{sample.clip_id}/frames.ctb",
                  "features": f"clips/{sample.clip_id}/features.jsonl"},
        "states": [int(s) for s in sample.states],
    }


def parse_label(value) -> int:
    if value not in LABEL_VALUES:
        raise FormatError(f"label must be 'ready' or 'not_ready', got {value!r}")
    return LABEL_VALUES[value]


def write_dataset(dataset: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    try:
        (out / "clips").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise FormatError(f"cannot write dataset to {out}: {e}") from None
    entries = []
    for i in range(len(dataset)):
        sample = dataset.sample(i)
        entry = clip_manifest(sample)
        clip_dir = out / "clips" / sample.clip_id
        clip_dir.mkdir(exist_ok=True)
        if sample.clips is None:
            raise FormatError("dataset has no rendered frames to write")
        write_ctb(out / entry["files"]["frames"], sample.clips)
        write_features(out / entry["files"]["features"], sample.streams)
        entries.append(entry)
    manifest = {"format_version": 1, "generator": dataset.meta, "clips": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out


def generate_dataset(count: int, seed: int, out_dir, n_frames: int = 16, frame_size: int = 32) -> Path:
    return write_dataset(synthesize(count, seed, n_frames, frame_size), out_dir)


def read_dataset(path, load_frames: bool = True) -> Dataset:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise FormatError(f"{root} has no manifest.json") from None
    samples = []
    for entry in manifest["clips"]:
        streams = read_features(root / entry["files"]["features"])
        if streams.n_frames != entry["n_frames"]:
            raise FormatError(f"{entry['clip_id']}: manifest says {entry['n_frames']} frames")
        clips = read_ctb(root / entry["files"]["frames"]) if load_frames else None
        states = np.array(entry.get("states", [-1] * streams.n_frames), dtype=np.int64)
        samples.append(ClipSample(entry["clip_id"], clips, streams, parse_label(entry["label"]),
                                  states, entry.get("fps", FPS)))
    return Dataset.from_samples(samples, manifest.get("generator", {}))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, named_arrays: dict, model_config: dict, norm: NormStats | None,
                    extra: dict | None = None) -> None:
    payload = io.BytesIO()
    manifest = {}
    for name, arr in named_arrays.items():
        offset = payload.tell()
        payload.write(encode_ctb(arr))
        manifest[name] = {"shape": list(np.shape(arr)), "offset": offset}
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model_config,
        "normalization_stats": None if norm is None else norm.to_dict(),
        "parameters": manifest,
    }
    if extra:
        header["extra"] = extra
    with open(path, "wb") as f:
        f.write(json.dumps(header, separators=(",", ":"), sort_keys=True).encode() + b"\n")
        f.write(payload.getvalue())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    nl = buf.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing checkpoint header")
    header = json.loads(buf[:nl])
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    body = memoryview(buf)[nl + 1 :]
    arrays = {}
    for name, spec in header["parameters"].items():
        arr, _ = decode_ctb(body, spec["offset"])
        if list(arr.shape) != spec["shape"]:
            raise FormatError(f"{path}: {name} shape {arr.shape} disagrees with manifest")
        arrays[name] = arr
    return header, arrays
