"""Binary tensor files and JSON instance sets.

Tensor layout (all little-endian)::

    offset 0   4 bytes   magic  b"UPST"
    offset 4   u16       version (1)
    offset 6   u8        dtype code (0=f32, 1=f64, 2=u32, 3=u16, 4=u8)
    offset 7   u8        ndim
    offset 8   ndim*u32  dims
    then       payload, row-major, prod(dims) * itemsize bytes
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .fusion import InstancePrediction
from .grid import BBox

MAGIC = b"UPST"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<u4"), 3: np.dtype("<u2"), 4: np.dtype("<u1")}
CODES = {dt.newbyteorder("="): code for code, dt in DTYPES.items()}


class FormatError(ValueError):
    """Malformed tensor or instance-set file."""

    def __init__(self, path, msg):
        super().__init__(f"{path}: {msg}")
        self.path = str(path)


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    code = CODES.get(array.dtype.newbyteorder("="))
    if code is None:
        raise ValueError(f"unsupported tensor dtype {array.dtype}")
    if array.ndim > 255:
        raise ValueError("too many dimensions")
    header = MAGIC + struct.pack("<HBB", VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype=DTYPES[code]).tobytes()


def decode_tensor(data: bytes, path="<bytes>") -> np.ndarray:
    if len(data) < 8 or data[:4] != MAGIC:
        raise FormatError(path, "not a UPST tensor (bad magic)")
    version, code, ndim = struct.unpack_from("<HBB", data, 4)
    if version != VERSION:
        raise FormatError(path, f"unsupported version {version}")
    if code not in DTYPES:
        raise FormatError(path, f"unknown dtype code {code}")
    end = 8 + 4 * ndim
    if len(data) < end:
        raise FormatError(path, "truncated header")
    dims = struct.unpack_from(f"<{ndim}I", data, 8)
    dtype = DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(data) - end != expected:
        raise FormatError(path, f"payload is {len(data) - end} bytes, expected {expected}")
    return np.frombuffer(data, dtype=dtype, offset=end).reshape(dims).astype(dtype.newbyteorder("="))


def write_tensor(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes(), path)


def write_instance_set(path, image_id: str, height: int, width: int, instances, mask_dir="masks") -> None:
    """Write instances as JSON; masks go to ``<mask_dir>/<image_id>_<k>.upst`` next to it."""
    path = Path(path)
    (path.parent / mask_dir).mkdir(parents=True, exist_ok=True)
    entries = []
    for k, inst in enumerate(instances):
        rel = f"{mask_dir}/{image_id}_{k}.upst"
        write_tensor(path.parent / rel, inst.mask_logits.astype(np.float64))
        entries.append(
            {"bbox": inst.bbox.as_list(), "class_id": int(inst.class_id), "class_prob": float(inst.class_prob), "mask": rel}
        )
    doc = {"image_id": image_id, "height": int(height), "width": int(width), "instances": entries}
    path.write_text(json.dumps(doc, indent=2) + "\n")


def read_instance_set(path) -> tuple[dict, list[InstancePrediction]]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        h, w = int(doc["height"]), int(doc["width"])
        entries = doc["instances"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise FormatError(path, f"invalid instance set ({e})") from e
    instances = []
    for k, e in enumerate(entries):
        try:
            box = BBox(*(int(v) for v in e["bbox"]))
            box.check_within(h, w)
            mask = read_tensor(path.parent / e["mask"]).astype(np.float64)
            instances.append(InstancePrediction(box, int(e["class_id"]), float(e["class_prob"]), mask))
        except FormatError:
            raise
        except (KeyError, TypeError, ValueError) as err:
            raise FormatError(path, f"instance {k}: {err}") from err
    return {"image_id": doc.get("image_id"), "height": h, "width": w}, instances


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
