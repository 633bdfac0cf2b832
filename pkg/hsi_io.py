"""Binary file formats for cubes, label maps and checkpoints, plus P6 map rendering.

All integers are little-endian u32. Layouts:

    HSI1  magic | H | W | C | H·W·C float32, pixel-interleaved ((y·W + x)·C + b)
    LBL1  magic | H | W | K | name_bytes | H·W uint16 | class names as UTF-8 JSON
    CKP1  magic | manifest_bytes | manifest JSON | float32 blob
"""
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from exceptions import (
    CheckpointError, ConfigurationError, FormatError, PaletteError, TruncationError, ValidationError,
)
from utils import setup_logging

logger = setup_logging()

CUBE_MAGIC = b"HSI1"
LABEL_MAGIC = b"LBL1"
CHECKPOINT_MAGIC = b"CKP1"

_U32 = struct.Struct("<I")


@dataclass
class HsiCube:
    """H×W×C reflectance cube, stored as a (H, W, C) float32 array."""
    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValidationError(f"cube must be H×W×C with every extent ≥ 1, got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValidationError("cube holds non-finite values")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def bands(self):
        return self.data.shape[2]


@dataclass
class LabelMap:
    """H×W class ids (0 = unlabeled) with a declared class count K."""
    labels: np.ndarray
    num_classes: int
    class_names: list = None

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint16)
        if self.labels.ndim != 2:
            raise ValidationError(f"label map must be 2-D, got shape {self.labels.shape}")
        top = int(self.labels.max()) if self.labels.size else 0
        if top > self.num_classes:
            raise ValidationError(f"label {top} exceeds declared class count {self.num_classes}")
        if self.class_names is not None and len(self.class_names) != self.num_classes:
            raise ValidationError(f"{len(self.class_names)} class names for {self.num_classes} classes")

    @property
    def height(self):
        return self.labels.shape[0]

    @property
    def width(self):
        return self.labels.shape[1]

    @property
    def labeled_count(self):
        return int(np.count_nonzero(self.labels))


@dataclass
class CheckpointMeta:
    epoch: int = 0
    val_oa: float = 0.0
    has_optimizer_state: bool = False
    extra: dict = field(default_factory=dict)


def _read_file(path, what):
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise ConfigurationError(f"cannot read {what} '{path}': {e.strerror or e}") from e


def _read_header(raw, magic, count, path):
    if raw[:4] != magic:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}", offset=0)
    end = 4 + 4 * count
    if len(raw) < end:
        raise TruncationError(f"{path}: header needs {end} bytes, file has {len(raw)}", offset=len(raw))
    return [_U32.unpack_from(raw, 4 + 4 * i)[0] for i in range(count)], end


def _check_payload(raw, start, expected, path):
    if len(raw) < start + expected:
        raise TruncationError(
            f"{path}: payload truncated, expected {expected} bytes from offset {start}, found {len(raw) - start}",
            offset=len(raw),
        )
    if len(raw) > start + expected:
        raise FormatError(f"{path}: {len(raw) - start - expected} trailing bytes after payload", offset=start + expected)


# ---------------------------------------------------------------- cubes

def write_cube(cube, path):
    h, w, c = cube.data.shape
    with open(path, "wb") as f:
        f.write(CUBE_MAGIC + struct.pack("<III", h, w, c))
        f.write(cube.data.astype("<f4", copy=False).tobytes())
    logger.debug(f"Wrote cube {h}x{w}x{c} to {path}")


def read_cube(path):
    """Read an HSI1 cube; header is validated before the payload is touched."""
    raw = _read_file(path, "cube")
    (h, w, c), start = _read_header(raw, CUBE_MAGIC, 3, path)
    if min(h, w, c) < 1:
        raise FormatError(f"{path}: zero extent in header {h}x{w}x{c}", offset=4)
    _check_payload(raw, start, h * w * c * 4, path)
    data = np.frombuffer(raw, dtype="<f4", count=h * w * c, offset=start).reshape(h, w, c)
    bad = np.flatnonzero(~np.isfinite(data))
    if bad.size:
        raise FormatError(f"{path}: non-finite value in payload", offset=start + int(bad[0]) * 4)
    return HsiCube(data.astype(np.float32))


# ---------------------------------------------------------------- label maps

def write_labels(label_map, path):
    names = b""
    if label_map.class_names is not None:
        names = json.dumps(label_map.class_names).encode("utf-8")
    h, w = label_map.labels.shape
    with open(path, "wb") as f:
        f.write(LABEL_MAGIC + struct.pack("<IIII", h, w, label_map.num_classes, len(names)))
        f.write(label_map.labels.astype("<u2", copy=False).tobytes())
        f.write(names)


def read_labels(path):
    raw = _read_file(path, "label map")
    (h, w, k, name_bytes), start = _read_header(raw, LABEL_MAGIC, 4, path)
    _check_payload(raw, start, h * w * 2 + name_bytes, path)
    labels = np.frombuffer(raw, dtype="<u2", count=h * w, offset=start).reshape(h, w)
    names = None
    if name_bytes:
        offset = start + h * w * 2
        try:
            names = json.loads(raw[offset:offset + name_bytes].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"{path}: class names are not valid JSON", offset=offset) from e
    return LabelMap(labels.astype(np.uint16), k, names)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(params, meta, path):
    """Write name->array pairs and run metadata as a CKP1 file.

    Args:
        params (dict): Parameter name -> numpy array (or Tensor); names are unique by construction
        meta (CheckpointMeta): Epoch, validation OA, optimizer-state flag, extras
        path (str): Destination file
    """
    entries, chunks, offset = [], [], 0
    for name, value in params.items():
        array = np.asarray(getattr(value, "data", value), dtype="<f4")
        entries.append({"name": name, "shape": list(array.shape), "offset": offset})
        chunks.append(array.tobytes())
        offset += array.nbytes
    manifest = json.dumps({
        "tensors": entries,
        "meta": {
            "epoch": meta.epoch,
            "val_oa": meta.val_oa,
            "has_optimizer_state": meta.has_optimizer_state,
            "extra": meta.extra,
        },
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC + _U32.pack(len(manifest)))
        f.write(manifest)
        for chunk in chunks:
            f.write(chunk)
    logger.info(f"Saved checkpoint with {len(entries)} tensors ({offset} bytes) to {path}")


def load_checkpoint(path):
    """Read a CKP1 file.

    Returns:
        tuple: (dict name -> float32 array, CheckpointMeta)
    """
    raw = _read_file(path, "checkpoint")
    (manifest_len,), start = _read_header(raw, CHECKPOINT_MAGIC, 1, path)
    if len(raw) < start + manifest_len:
        raise TruncationError(f"{path}: manifest truncated", offset=len(raw))
    try:
        manifest = json.loads(raw[start:start + manifest_len].decode("utf-8"))
        entries = manifest["tensors"]
        meta_raw = manifest["meta"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: corrupt manifest ({e})") from e
    if not isinstance(entries, list) or not isinstance(meta_raw, dict):
        raise CheckpointError(f"{path}: corrupt manifest, 'tensors' must be a list and 'meta' an object")

    blob = raw[start + manifest_len:]
    params, spans = {}, []
    for position, entry in enumerate(entries):
        name, shape, offset = _manifest_entry(entry, position, path)
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if name in params:
            raise CheckpointError(f"{path}: corrupt manifest, duplicate tensor '{name}'", parameter=name)
        if offset < 0 or offset + nbytes > len(blob):
            raise CheckpointError(
                f"{path}: corrupt manifest, '{name}' spans [{offset}, {offset + nbytes}) past blob end {len(blob)}",
                parameter=name,
            )
        spans.append((offset, offset + nbytes, name))
        params[name] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape).astype(np.float32)

    spans.sort()
    for (_, end, first), (begin, _, second) in zip(spans, spans[1:]):
        if begin < end:
            raise CheckpointError(f"{path}: corrupt manifest, '{first}' overlaps '{second}'", parameter=second)

    try:
        meta = CheckpointMeta(
            epoch=int(meta_raw.get("epoch", 0)),
            val_oa=float(meta_raw.get("val_oa", 0.0)),
            has_optimizer_state=bool(meta_raw.get("has_optimizer_state", False)),
            extra=dict(meta_raw.get("extra", {})),
        )
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: corrupt manifest meta ({e})") from e
    return params, meta


def _manifest_entry(entry, position, path):
    if not isinstance(entry, dict):
        raise CheckpointError(f"{path}: corrupt manifest, entry {position} is not an object", parameter=f"#{position}")
    name = entry.get("name")
    if not isinstance(name, str) or not name:
        raise CheckpointError(f"{path}: corrupt manifest, entry {position} has no name", parameter=f"#{position}")
    shape, offset = entry.get("shape"), entry.get("offset")
    if not isinstance(shape, list) or not all(_is_count(d) for d in shape):
        raise CheckpointError(f"{path}: corrupt manifest, '{name}' shape {shape!r} is not a list of extents",
                              parameter=name)
    if not _is_count(offset):
        raise CheckpointError(f"{path}: corrupt manifest, '{name}' offset {offset!r} is not a byte offset",
                              parameter=name)
    return name, tuple(shape), offset


def _is_count(value):
    return isinstance(value, int) and not isinstance(value, bool) and value >= 0


def restore_params(template, loaded):
    """Copy checkpoint arrays into ``template`` (name -> Tensor) all-or-nothing.

    Every name and shape is checked before any tensor is written.
    """
    for name, tensor in template.items():
        if name not in loaded:
            raise CheckpointError(f"checkpoint is missing parameter '{name}'", parameter=name)
        if tuple(loaded[name].shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"shape mismatch for '{name}': checkpoint {tuple(loaded[name].shape)}, model {tuple(tensor.shape)}",
                parameter=name,
            )
    for name, tensor in template.items():
        tensor.data = np.array(loaded[name], dtype=tensor.dtype)
        tensor.grad = None
    return template


# ---------------------------------------------------------------- rendering

def load_palette(path):
    """Palette file: JSON object label -> [r, g, b]."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except OSError as e:
        raise ConfigurationError(f"cannot read palette '{path}': {e.strerror or e}") from e
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise PaletteError(f"{path}: palette is not valid JSON ({e})") from e
    try:
        return {int(k): tuple(int(c) for c in v) for k, v in raw.items()}
    except (AttributeError, TypeError, ValueError) as e:
        raise PaletteError(f"{path}: palette must map labels to [r, g, b] ({e})") from e


def default_palette(num_classes):
    """Deterministic, well separated colours for labels 1..K."""
    palette = {}
    for label in range(1, num_classes + 1):
        hue = (label - 1) * 0.618033988749895 % 1.0
        sector, frac = divmod(hue * 6.0, 1.0)
        v, s = 230, 0.75
        p, q, t = v * (1 - s), v * (1 - s * frac), v * (1 - s * (1 - frac))
        rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][int(sector) % 6]
        palette[label] = tuple(int(round(c)) for c in rgb)
    return palette


def render_map(predictions, palette):
    """Render a label map as binary P6 portable-pixmap bytes; label 0 is black."""
    labels = predictions.labels
    present = np.unique(labels)
    missing = [int(v) for v in present if v != 0 and int(v) not in palette]
    if missing:
        raise PaletteError(f"no palette entry for label(s) {missing}")
    lut = np.zeros((int(present.max()) + 1 if present.size else 1, 3), dtype=np.uint8)
    for label, rgb in palette.items():
        if 0 < label < lut.shape[0]:
            lut[label] = rgb
    header = f"P6\n{predictions.width} {predictions.height}\n255\n".encode("ascii")
    return header + lut[labels].tobytes()
