"""Datasets: IDX binary files and synthetic Gaussian blobs."""
from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractError, FormatError

# IDX type byte -> big-endian numpy dtype
IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_TYPE_BY_KIND = {
    np.dtype("u1"): 0x08,
    np.dtype("i1"): 0x09,
    np.dtype("i2"): 0x0B,
    np.dtype("i4"): 0x0C,
    np.dtype("f4"): 0x0D,
    np.dtype("f8"): 0x0E,
}


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    split: str = "train"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ContractError(f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ContractError(f"labels must lie in [0, {self.n_classes})")
        if self.inputs.size and (self.inputs.min() < 0.0 or self.inputs.max() > 1.0):
            raise ContractError("inputs must lie in [0, 1]")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.inputs.shape[1:]

    def flat(self) -> "Dataset":
        return Dataset(self.inputs.reshape(len(self), -1), self.labels, self.n_classes, self.split, dict(self.provenance))

    def take(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.n_classes, self.split, dict(self.provenance))


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def read_idx(path) -> np.ndarray:
    """Parse an IDX file into an array with its stored dtype (native byte order)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    return parse_idx(raw)


def parse_idx(raw: bytes) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"IDX header needs 4 bytes, file has {len(raw)}", offset=len(raw))
    if raw[0] != 0 or raw[1] != 0:
        raise FormatError("bad IDX magic: first two bytes must be zero", offset=0)
    type_code, ndim = raw[2], raw[3]
    if type_code not in IDX_TYPES:
        raise FormatError(f"unsupported IDX type byte 0x{type_code:02x}", offset=2)
    if ndim == 0:
        raise FormatError("IDX file declares zero dimensions", offset=3)
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"truncated IDX header: expected {header_end} bytes, got {len(raw)}", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    dtype = IDX_TYPES[type_code]
    expected = int(np.prod(dims)) * dtype.itemsize
    actual = len(raw) - header_end
    if actual != expected:
        raise FormatError(
            f"IDX payload length mismatch: expected {expected} bytes, got {actual}", offset=header_end + min(actual, expected)
        )
    arr = np.frombuffer(raw, dtype=dtype, offset=header_end).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))


def write_idx(array, path) -> None:
    arr = np.asarray(array)
    try:
        type_code = _TYPE_BY_KIND[np.dtype(f"{arr.dtype.kind}{arr.dtype.itemsize}")]
    except (KeyError, TypeError):
        raise ContractError(f"dtype {arr.dtype} has no IDX type code") from None
    header = bytes([0, 0, type_code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.astype(IDX_TYPES[type_code]).tobytes())


def companion_labels_path(images_path) -> str:
    head, name = os.path.split(str(images_path))
    for a, b in (("images-idx3", "labels-idx1"), ("images", "labels")):
        if a in name:
            return os.path.join(head, name.replace(a, b))
    raise ContractError(f"cannot infer a labels file for {images_path}; pass labels_path")


def load_idx(images_path, labels_path=None, n_classes: int | None = None, split: str = "train") -> Dataset:
    """Load an image IDX file and its label companion.

    Unsigned-byte images are scaled to ``[0, 1]`` by 1/255; float payloads are
    taken as stored.  Images with two spatial dims gain a channel axis.
    """
    labels_path = labels_path or companion_labels_path(images_path)
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
        raise FormatError(f"labels file holds shape {labels.shape}, expected ({images.shape[0]},)")
    idx_shape = images.shape
    if images.dtype == np.uint8:
        inputs = images.astype(np.float64) / 255.0
    else:
        inputs = images.astype(np.float64)
    if inputs.ndim == 3:
        inputs = inputs[:, None, :, :]
    n_classes = int(n_classes if n_classes is not None else labels.max() + 1)
    prov = {
        "source": "idx",
        "images": str(images_path),
        "labels": str(labels_path),
        "idx_shape": list(idx_shape),
        "idx_dtype": images.dtype.str,
    }
    return Dataset(inputs, labels.astype(np.int64), n_classes, split, prov)


def save_idx(dataset: Dataset, images_path, labels_path=None, dtype: str | None = None) -> None:
    """Write a dataset back to IDX.

    ``dtype`` defaults to the dtype it was loaded with (``uint8`` for
    generated data is lossy, so non-IDX data defaults to ``float64``).
    """
    labels_path = labels_path or companion_labels_path(images_path)
    prov = dataset.provenance
    dtype = np.dtype(dtype or prov.get("idx_dtype", "<f8"))
    shape = tuple(prov.get("idx_shape", dataset.inputs.shape))
    if int(np.prod(shape)) != dataset.inputs.size:
        shape = dataset.inputs.shape
    x = dataset.inputs.reshape(shape)
    if dtype == np.uint8:
        x = np.rint(x * 255.0).astype(np.uint8)
    else:
        x = x.astype(dtype)
    write_idx(x, images_path)
    label_dtype = np.uint8 if dataset.n_classes <= 256 else np.int32
    write_idx(dataset.labels.astype(label_dtype), labels_path)


# ---------------------------------------------------------------------------
# Synthetic blobs
# ---------------------------------------------------------------------------

def gen_synthetic(
    classes: int,
    dim: int,
    per_class: int,
    separation: float,
    seed: int = 0,
    std: float = 0.1,
    split: str = "train",
) -> Dataset:
    """Gaussian blobs around 0.5 whose class means are ``separation`` apart.

    The class means depend only on ``seed``; the samples also depend on
    ``split``, so train/val/test share geometry but not points.
    """
    if classes < 2:
        raise ContractError("need at least two classes")
    geo = np.random.default_rng(seed)
    if dim >= classes:
        q, _ = np.linalg.qr(geo.standard_normal((dim, classes)))
        directions = q.T
    else:
        directions = geo.standard_normal((classes, dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = 0.5 + separation / np.sqrt(2.0) * directions
    rng = np.random.default_rng([seed, zlib.crc32(split.encode())])
    labels = np.repeat(np.arange(classes), per_class)
    inputs = means[labels] + std * rng.standard_normal((labels.size, dim))
    np.clip(inputs, 0.0, 1.0, out=inputs)
    prov = {
        "source": "synthetic",
        "classes": classes,
        "dim": dim,
        "per_class": per_class,
        "separation": separation,
        "std": std,
        "seed": seed,
    }
    return Dataset(inputs, labels, classes, split, prov)
