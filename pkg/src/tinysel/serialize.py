"""Little-endian binary container for models, composites and datasets.

Layout (all integers little-endian u32 unless noted):

    magic "DTMS" | version | kind

kind 0 (model):
    in_channels | in_length | num_taps | num_taps * (layer_index, tap_channels)
    | num_layers | per-layer (kind_code, out_channels, kernel_width,
    pool_width; -1 as i32 where not applicable) | f32 parameter blobs in
    declaration order (conv: w then b; fully-connected: w then b)

kind 1 (composite):
    num_classifiers m | aggregation flag | config blob length | config JSON
    bytes | (1 + m) length-prefixed embedded model files (selector first)

kind 2 (dataset):
    n | channels | length | num_classes | has_subsets | i32 labels[n]
    | i32 subset_ids[n] if has_subsets | f32 samples (n*channels*length)
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from .layers import KINDS, LayerSpec
from .model import Model

MAGIC = b"DTMS"
VERSION = 1
KIND_MODEL, KIND_COMPOSITE, KIND_DATASET = 0, 1, 2


class FormatError(ValueError):
    """Raised on a malformed or mismatched binary file."""


def _w_u32(f, *vals):
    f.write(struct.pack("<" + "I" * len(vals), *vals))


def _w_i32(f, *vals):
    f.write(struct.pack("<" + "i" * len(vals), *vals))


def _r_u32(f, n=1):
    vals = struct.unpack("<" + "I" * n, f.read(4 * n))
    return vals[0] if n == 1 else vals


def _r_i32(f, n=1):
    vals = struct.unpack("<" + "i" * n, f.read(4 * n))
    return vals[0] if n == 1 else vals


def _write_header(f, kind):
    f.write(MAGIC)
    _w_u32(f, VERSION, kind)


def _read_header(f, expected_kind=None):
    magic = f.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    version, kind = _r_u32(f, 2)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if expected_kind is not None and kind != expected_kind:
        raise FormatError(f"expected kind {expected_kind}, found {kind}")
    return kind


def model_to_bytes(model: Model) -> bytes:
    f = io.BytesIO()
    _write_header(f, KIND_MODEL)
    _w_u32(f, model.input_shape[0], model.input_shape[1])
    _w_u32(f, len(model.tap_channels))
    for idx in model.tap_order:
        _w_u32(f, idx, model.tap_channels[idx])
    _w_u32(f, len(model.specs))
    for spec in model.specs:
        _w_u32(f, KINDS.index(spec.kind))
        _w_i32(f, spec.out_channels or -1, spec.kernel_width or -1,
               spec.pool_width or -1)
    for layer in model.layers:
        for name in layer.params:
            blob = np.ascontiguousarray(layer.params[name], dtype="<f4")
            f.write(blob.tobytes())
    return f.getvalue()


def model_from_bytes(data: bytes) -> Model:
    f = io.BytesIO(data)
    _read_header(f, KIND_MODEL)
    in_c, in_l = _r_u32(f, 2)
    num_taps = _r_u32(f)
    taps = {}
    for _ in range(num_taps):
        idx, ch = _r_u32(f, 2)
        taps[idx] = ch
    num_layers = _r_u32(f)
    specs = []
    for _ in range(num_layers):
        code = _r_u32(f)
        oc, kw, pw = _r_i32(f, 3)
        specs.append(LayerSpec(KINDS[code],
                               out_channels=None if oc < 0 else oc,
                               kernel_width=None if kw < 0 else kw,
                               pool_width=None if pw < 0 else pw))
    model = Model((in_c, in_l), specs, seed=None, tap_channels=taps)
    for layer in model.layers:
        for name in layer.params:
            shape = layer.params[name].shape
            count = int(np.prod(shape))
            blob = f.read(4 * count)
            if len(blob) != 4 * count:
                raise FormatError("truncated parameter blob")
            layer.params[name] = np.frombuffer(blob, dtype="<f4").reshape(shape).copy()
    return model


def save_model(model: Model, path):
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


def composite_to_bytes(composite, config: dict | None = None) -> bytes:
    f = io.BytesIO()
    _write_header(f, KIND_COMPOSITE)
    _w_u32(f, len(composite.classifiers), int(composite.aggregation_enabled))
    blob = json.dumps(config or {}, sort_keys=True).encode()
    _w_u32(f, len(blob))
    f.write(blob)
    for m in [composite.selector] + list(composite.classifiers):
        mb = model_to_bytes(m)
        _w_u32(f, len(mb))
        f.write(mb)
    return f.getvalue()


def composite_from_bytes(data: bytes):
    from .builder import CompositeModel

    f = io.BytesIO(data)
    _read_header(f, KIND_COMPOSITE)
    m, agg = _r_u32(f, 2)
    blob_len = _r_u32(f)
    config = json.loads(f.read(blob_len).decode()) if blob_len else {}
    models = []
    for _ in range(1 + m):
        size = _r_u32(f)
        models.append(model_from_bytes(f.read(size)))
    return CompositeModel(selector=models[0], classifiers=models[1:],
                          aggregation_enabled=bool(agg)), config


def save_composite(composite, path, config: dict | None = None):
    with open(path, "wb") as fh:
        fh.write(composite_to_bytes(composite, config))


def load_composite(path):
    with open(path, "rb") as fh:
        return composite_from_bytes(fh.read())


def dataset_to_bytes(dataset) -> bytes:
    f = io.BytesIO()
    _write_header(f, KIND_DATASET)
    n, c, l = dataset.samples.shape
    has_subsets = dataset.subset_ids is not None
    _w_u32(f, n, c, l, dataset.num_classes, int(has_subsets))
    f.write(np.ascontiguousarray(dataset.labels, dtype="<i4").tobytes())
    if has_subsets:
        f.write(np.ascontiguousarray(dataset.subset_ids, dtype="<i4").tobytes())
    f.write(np.ascontiguousarray(dataset.samples, dtype="<f4").tobytes())
    return f.getvalue()


def dataset_from_bytes(data: bytes):
    from .data import Dataset

    f = io.BytesIO(data)
    _read_header(f, KIND_DATASET)
    n, c, l, num_classes, has_subsets = _r_u32(f, 5)
    labels = np.frombuffer(f.read(4 * n), dtype="<i4").astype(np.int64)
    subset_ids = None
    if has_subsets:
        subset_ids = np.frombuffer(f.read(4 * n), dtype="<i4").astype(np.int64)
    samples = np.frombuffer(f.read(4 * n * c * l), dtype="<f4").reshape(n, c, l).copy()
    return Dataset(samples=samples, labels=labels, num_classes=num_classes,
                   subset_ids=subset_ids)


def save_dataset(dataset, path):
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(dataset))


def load_dataset(path):
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())
