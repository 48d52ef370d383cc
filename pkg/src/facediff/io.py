"""Binary file formats for sequences, templates, checkpoints, and dataset manifests.

Sequence files (motion, audio, template) share a 20-byte little-endian header::

    offset  size  field
    0       4     magic   b"FDMO" motion | b"FDAU" audio | b"FDTP" template
    4       2     version (uint16, currently 1)
    6       2     reserved, zero
    8       4     T       frames (1 for templates)
    12      4     W       V for motion/template, D for audio
    16      4     fps     (0 for templates)

followed by float32 little-endian values in row-major order: T*W*3 for motion,
T*D for audio, and V*4 for templates (x, y, z, region label per vertex).

Checkpoints are::

    b"FDCK", uint16 version, uint16 reserved, uint32 header length,
    UTF-8 JSON header (model config), uint32 tensor count, then per tensor:
    uint32 name length, UTF-8 name, uint32 ndim, ndim x uint32 dims,
    float64 little-endian payload.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .data import AudioFeatureSequence, MeshTemplate, MotionSequence, StyleOneHot

FORMAT_VERSION = 1
CHECKPOINT_VERSION = 1

MAGIC_MOTION = b"FDMO"
MAGIC_AUDIO = b"FDAU"
MAGIC_TEMPLATE = b"FDTP"
MAGIC_CHECKPOINT = b"FDCK"

_HEADER = struct.Struct("<4sHHIII")


class FormatError(ValueError):
    """Base class for malformed files."""


class CorruptHeaderError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


def _pack(magic: bytes, T: int, W: int, fps: int, payload: np.ndarray) -> bytes:
    body = np.ascontiguousarray(payload, dtype="<f4").tobytes()
    return _HEADER.pack(magic, FORMAT_VERSION, 0, T, W, fps) + body


def _unpack(blob: bytes, magic: bytes, per_row: int) -> Tuple[int, int, int, np.ndarray]:
    if len(blob) < _HEADER.size:
        raise CorruptHeaderError(f"file shorter than the {_HEADER.size}-byte header")
    got_magic, version, reserved, T, W, fps = _HEADER.unpack_from(blob)
    if got_magic != magic:
        raise CorruptHeaderError(f"bad magic {got_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, reader supports {FORMAT_VERSION}")
    if reserved != 0 or T == 0 or W == 0:
        raise CorruptHeaderError(f"invalid header fields T={T} W={W} reserved={reserved}")
    count = T * W * per_row
    need = _HEADER.size + 4 * count
    if len(blob) < need:
        raise TruncatedPayloadError(f"payload has {len(blob) - _HEADER.size} bytes, expected {4 * count}")
    if len(blob) > need:
        raise CorruptHeaderError(f"{len(blob) - need} trailing bytes after payload")
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=_HEADER.size)
    return T, W, fps, data.astype(np.float32)


def save_motion(path, motion: MotionSequence) -> None:
    off = np.asarray(motion.offsets)
    Path(path).write_bytes(_pack(MAGIC_MOTION, off.shape[0], off.shape[1], motion.fps, off))


def load_motion(path) -> MotionSequence:
    T, V, fps, data = _unpack(Path(path).read_bytes(), MAGIC_MOTION, 3)
    return MotionSequence(data.reshape(T, V, 3), fps=fps)


def save_audio(path, audio: AudioFeatureSequence) -> None:
    f = np.asarray(audio.features)
    Path(path).write_bytes(_pack(MAGIC_AUDIO, f.shape[0], f.shape[1], audio.fps, f))


def load_audio(path) -> AudioFeatureSequence:
    T, D, fps, data = _unpack(Path(path).read_bytes(), MAGIC_AUDIO, 1)
    return AudioFeatureSequence(data.reshape(T, D), fps=fps)


def save_template(path, template: MeshTemplate) -> None:
    pos = np.asarray(template.rest_positions, dtype=np.float32)
    rows = np.column_stack([pos, np.asarray(template.region_labels, dtype=np.float32)])
    Path(path).write_bytes(_pack(MAGIC_TEMPLATE, 1, pos.shape[0], 0, rows))


def load_template(path) -> MeshTemplate:
    _, V, _, data = _unpack(Path(path).read_bytes(), MAGIC_TEMPLATE, 4)
    rows = data.reshape(V, 4)
    return MeshTemplate(rows[:, :3].copy(), rows[:, 3].astype(np.int64))


_SAVERS = {MotionSequence: save_motion, AudioFeatureSequence: save_audio,
           MeshTemplate: save_template}
_LOADERS = {MAGIC_MOTION: load_motion, MAGIC_AUDIO: load_audio,
            MAGIC_TEMPLATE: load_template}


def save_sequence(path, obj) -> None:
    """Write a motion, audio, or template object in its binary format."""
    try:
        saver = _SAVERS[type(obj)]
    except KeyError:
        raise TypeError(f"cannot save {type(obj).__name__}") from None
    saver(path, obj)


def load_sequence(path):
    """Read any sequence file, dispatching on its magic bytes."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic not in _LOADERS:
        raise CorruptHeaderError(f"unknown magic {magic!r} in {path}")
    return _LOADERS[magic](path)


def save_mask(path, indices) -> None:
    Path(path).write_text("".join(f"{int(i)}\n" for i in indices))


def load_mask(path, vertex_count: int) -> np.ndarray:
    """Read a plain list of vertex indices (one per line, '#' comments) into a bool mask."""
    mask = np.zeros(vertex_count, dtype=bool)
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        idx = int(line)
        if not 0 <= idx < vertex_count:
            raise FormatError(f"vertex index {idx} out of range for V={vertex_count}")
        mask[idx] = True
    return mask


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, config: dict, params: Dict[str, np.ndarray]) -> None:
    header = json.dumps(config, sort_keys=True).encode()
    parts = [MAGIC_CHECKPOINT, struct.pack("<HHI", CHECKPOINT_VERSION, 0, len(header)),
             header, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f8")
        enc = name.encode()
        parts.append(struct.pack("<I", len(enc)) + enc)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise TruncatedPayloadError(f"checkpoint truncated at byte {pos}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC_CHECKPOINT:
        raise CorruptHeaderError("not a checkpoint file")
    version, _, header_len = struct.unpack("<HHI", take(8))
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}")
    try:
        config = json.loads(take(header_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeaderError(f"unreadable checkpoint header: {exc}") from None
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(blob):
        raise CorruptHeaderError("trailing bytes after checkpoint tensors")
    return config, params


# -- manifest ------------------------------------------------------------------

MANIFEST_HEADER = "# facediff dataset manifest v1"


def write_manifest(path, template_path: str, subject_count: int,
                   entries: List[Tuple[str, str, int, str]]) -> None:
    """Plain-text index. Lines: ``template <path>``, ``subjects <K>``, then
    ``seq <motion path> <audio path> <style id> <split>`` per sequence.
    Paths are relative to the manifest's directory."""
    lines = [MANIFEST_HEADER, f"template {template_path}", f"subjects {subject_count}"]
    lines += [f"seq {m} {a} {k} {split}" for m, a, k, split in entries]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    root = Path(path).parent
    out = {"template": None, "subjects": None, "entries": []}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split()
        if fields[0] == "template" and len(fields) == 2:
            out["template"] = root / fields[1]
        elif fields[0] == "subjects" and len(fields) == 2:
            out["subjects"] = int(fields[1])
        elif fields[0] == "seq" and len(fields) == 5:
            out["entries"].append((root / fields[1], root / fields[2], int(fields[3]), fields[4]))
        else:
            raise FormatError(f"{path}:{lineno}: unrecognised manifest line {line!r}")
    if out["template"] is None or out["subjects"] is None:
        raise FormatError(f"{path}: manifest missing template or subjects line")
    return out


def load_manifest_items(path, split=None):
    """Load ``(template, [(audio, motion, style, motion_relpath)])`` from a manifest."""
    man = read_manifest(path)
    template = load_template(man["template"])
    K = man["subjects"]
    items = []
    root = Path(path).parent
    for mpath, apath, k, sp in man["entries"]:
        if split is not None and sp != split:
            continue
        items.append((load_audio(apath), load_motion(mpath), StyleOneHot(k, K),
                      str(Path(mpath).relative_to(root))))
    return template, items
