"""File formats: volumes, dataset manifests and checkpoints.

Volume
    ``name.json`` header plus a raw little-endian blob next to it::

        {"shape": [64, 64, 32], "spacing_mm": [0.85, 0.85, 1.0],
         "dtype": "f32", "order": "row-major",
         "axis_names": ["x", "y", "z"], "blob": "name.raw"}

Checkpoint
    ``DMCNETCK`` magic, a little-endian ``uint32`` format version, a ``uint64``
    header length, a UTF-8 JSON header and then every tensor as packed
    little-endian float64 in header order. The header lists each tensor's
    name, shape and byte offset and carries the network spec, epoch counter,
    optimizer hyper-parameters and the generator state.

Every writer goes through :func:`atomic_write` (temporary file + rename).
"""

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, FormatError

DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


@dataclass
class VolumeSample:
    """Image volume, aligned integer label volume (or ``None``) and voxel spacing in mm."""

    image: np.ndarray
    label: np.ndarray = None
    spacing: tuple = None
    case_id: str = None

    def __post_init__(self):
        if self.spacing is None:
            self.spacing = (1.0,) * self.image.ndim
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.label is not None and self.label.shape != self.image.shape:
            raise DataError(f"label shape {self.label.shape} != image shape {self.image.shape}")


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple
    axis_names: tuple = None


def atomic_write(path, payload):
    """Write bytes or text to ``path`` via a temporary file in the same directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(payload, str):
        payload = payload.encode("utf-8")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _check_spacing(spacing, ndim, where):
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != ndim:
        raise DataError(f"{where}: spacing {spacing} has {len(spacing)} entries for {ndim} axes")
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise DataError(f"{where}: spacing must be positive, got {spacing}")
    return spacing


def write_volume(path, data, spacing, axis_names=None, dtype=None):
    """Write ``data`` as ``path`` (JSON header) plus a sibling ``.raw`` blob."""
    path = Path(path)
    data = np.asarray(data)
    if dtype is None:
        dtype = "u8" if np.issubdtype(data.dtype, np.integer) or data.dtype == bool else "f32"
    if dtype not in DTYPES:
        raise DataError(f"unsupported volume dtype {dtype!r}; have {sorted(DTYPES)}")
    if dtype == "u8" and data.size and (data.min() < 0 or data.max() > 255):
        raise DataError("u8 volume values must lie in [0, 255]")
    spacing = _check_spacing(spacing, data.ndim, str(path))
    if axis_names is None:
        axis_names = ["x", "y", "z"][: data.ndim] if data.ndim <= 3 else [f"a{i}" for i in range(data.ndim)]
    blob = path.with_suffix(".raw")
    header = {
        "shape": list(data.shape),
        "spacing_mm": list(spacing),
        "dtype": dtype,
        "order": "row-major",
        "axis_names": list(axis_names),
        "blob": blob.name,
    }
    atomic_write(blob, np.ascontiguousarray(data, dtype=DTYPES[dtype]).tobytes())
    atomic_write(path, dumps_json(header))


def _header(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise FormatError(f"volume header not found: {path}", path=str(path)) from None
    try:
        header = json.loads(text)
    except json.JSONDecodeError as err:
        raise FormatError(f"{path}: malformed JSON header: {err.msg}", path=str(path),
                          offset=err.pos) from None
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header must be a JSON object", path=str(path), offset=0)
    for key in ("shape", "spacing_mm", "dtype", "blob"):
        if key not in header:
            raise FormatError(f"{path}: header is missing {key!r}", path=str(path))
    return header


def read_volume(path):
    """Read a volume written by :func:`write_volume`; returns :class:`Volume`."""
    path = Path(path)
    header = _header(path)
    dtype = header["dtype"]
    if dtype not in DTYPES:
        raise FormatError(f"{path}: unknown dtype {dtype!r}; expected one of {sorted(DTYPES)}",
                          path=str(path))
    if header.get("order", "row-major") != "row-major":
        raise FormatError(f"{path}: unsupported order {header['order']!r}", path=str(path))
    shape = tuple(int(n) for n in header["shape"])
    if any(n < 1 for n in shape):
        raise DataError(f"{path}: extents must be positive, got {shape}")
    spacing = _check_spacing(header["spacing_mm"], len(shape), str(path))
    blob = path.parent / header["blob"]
    try:
        raw = blob.read_bytes()
    except FileNotFoundError:
        raise FormatError(f"{path}: blob {blob} is missing", path=str(blob)) from None
    expected = int(np.prod(shape)) * DTYPES[dtype].itemsize
    if len(raw) != expected:
        raise FormatError(
            f"{blob}: length mismatch, expected {expected} bytes, found {len(raw)}",
            path=str(blob),
            offset=min(len(raw), expected),
        )
    data = np.frombuffer(raw, dtype=DTYPES[dtype]).reshape(shape).copy()
    names = header.get("axis_names")
    return Volume(data, spacing, tuple(names) if names else None)


def read_sample(image_path, label_path=None, case_id=None):
    image = read_volume(image_path)
    label = read_volume(label_path).data.astype(np.int64) if label_path else None
    return VolumeSample(image.data.astype(np.float64), label, image.spacing, case_id)


# -- dataset manifest ---------------------------------------------------------


def write_manifest(path, cases, num_classes, provenance=""):
    """``cases``: dicts with ``case_id``, ``image``, ``label`` (paths relative to the manifest)."""
    doc = {
        "num_classes": int(num_classes),
        "provenance": provenance,
        "cases": [dict(c) for c in cases],
    }
    atomic_write(path, dumps_json(doc))


def read_manifest(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FormatError(f"manifest not found: {path}", path=str(path)) from None
    except json.JSONDecodeError as err:
        raise FormatError(f"{path}: malformed manifest: {err.msg}", path=str(path),
                          offset=err.pos) from None
    if "cases" not in doc or "num_classes" not in doc:
        raise FormatError(f"{path}: manifest needs 'cases' and 'num_classes'", path=str(path))
    for case in doc["cases"]:
        for key in ("case_id", "image", "label"):
            if key not in case:
                raise FormatError(f"{path}: case entry missing {key!r}: {case}", path=str(path))
    return doc


def load_dataset(manifest_path):
    """All cases of a manifest as :class:`VolumeSample` objects, in manifest order."""
    manifest_path = Path(manifest_path)
    doc = read_manifest(manifest_path)
    base = manifest_path.parent
    samples = []
    for case in doc["cases"]:
        s = read_sample(base / case["image"], base / case["label"], case["case_id"])
        if s.label.max() >= doc["num_classes"]:
            raise DataError(
                f"case {case['case_id']}: label id {int(s.label.max())} >= num_classes {doc['num_classes']}"
            )
        samples.append(s)
    return doc, samples


# -- checkpoints --------------------------------------------------------------

MAGIC = b"DMCNETCK"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    spec: dict
    params: dict
    velocities: dict
    rng_state: dict
    epoch: int
    extra: dict


def save_checkpoint(path, spec, params, velocities=None, rng_state=None, epoch=0, extra=None):
    """Serialise named float64 arrays plus metadata; bytes depend only on the inputs."""
    velocities = velocities or {}
    entries = [("param", n, a) for n, a in params.items()] + [
        ("velocity", n, a) for n, a in velocities.items()
    ]
    tensors, blobs, offset = [], [], 0
    for group, name, arr in entries:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        tensors.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "spec": spec,
        "epoch": int(epoch),
        "rng_state": rng_state,
        "extra": extra or {},
        "tensors": tensors,
        "data_bytes": offset,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    atomic_write(path, _PREFIX.pack(MAGIC, VERSION, len(head)) + head + b"".join(blobs))


def load_checkpoint(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise FormatError(f"checkpoint not found: {path}", path=str(path)) from None
    if len(raw) < _PREFIX.size:
        raise FormatError(f"{path}: truncated checkpoint prefix", path=str(path), offset=len(raw))
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)", path=str(path), offset=0)
    if version != VERSION:
        raise FormatError(f"{path}: checkpoint version {version} unsupported (expected {VERSION})",
                          path=str(path), offset=8)
    start = _PREFIX.size
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError(f"{path}: corrupt checkpoint header", path=str(path), offset=start) from None
    data = raw[start + hlen:]
    if len(data) != header["data_bytes"]:
        raise FormatError(
            f"{path}: length mismatch, expected {header['data_bytes']} data bytes, found {len(data)}",
            path=str(path),
            offset=start + hlen + min(len(data), header["data_bytes"]),
        )
    groups = {"param": {}, "velocity": {}}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=t["offset"])
        groups[t["group"]][t["name"]] = arr.reshape(t["shape"]).astype(np.float64)
    return Checkpoint(header["spec"], groups["param"], groups["velocity"], header["rng_state"],
                      header["epoch"], header["extra"])


def apply_params(model, params):
    """Copy checkpoint arrays into ``model``; names and shapes must match exactly."""
    store = model.params
    for name in store:
        if name not in params:
            raise ContractError(f"checkpoint does not match network: tensor {name!r} missing")
        if params[name].shape != store[name].shape:
            raise ContractError(
                f"checkpoint does not match network: tensor {name!r} has shape "
                f"{params[name].shape}, network expects {store[name].shape}"
            )
    for name in params:
        if name not in store:
            raise ContractError(f"checkpoint does not match network: unexpected tensor {name!r}")
    for name, t in store.items():
        t.data[...] = params[name]
