"""Binary checkpoint container.

Layout (all integers little-endian):

    8 bytes   magic b"SVLF0001"
    u32       length of the JSON header, then the UTF-8 JSON header
              (grid config, decoder specs, Adam hyper-parameters and steps)
    u32       number of tensors, then per tensor:
              u16 name length, name, u8 dtype code, u8 ndim,
              ndim x u64 dims, raw little-endian data (C order)
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .decoders import AdamState, DecoderParams, MlpSpec
from .features import FeatureVolume
from .model import SVLFModel
from .octree import GridConfig, SparseOctree

MAGIC = b"SVLF0001"
DTYPES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "<u1", 4: "<i4"}
DTYPE_CODES = {np.dtype(v).str: k for k, v in DTYPES.items()}


class CheckpointError(ValueError):
    pass


def _tensors(model: SVLFModel) -> list[tuple[str, np.ndarray]]:
    out = [("octree.leaves", model.octree.leaves),
           ("features.thickness", model.thickness_features.data),
           ("features.color", model.color_features.data)]
    for prefix, dec in (("thickness", model.thickness), ("color", model.color)):
        for i, (W, b) in enumerate(zip(dec.weights, dec.biases)):
            out += [(f"{prefix}.W{i}", W), (f"{prefix}.b{i}", b)]
    for prefix, st in (("adam_thickness", model.adam_thickness), ("adam_color", model.adam_color)):
        for i, (m, v) in enumerate(zip(st.m, st.v)):
            out += [(f"{prefix}.m{i}", m), (f"{prefix}.v{i}", v)]
    return out


def _adam_meta(st: AdamState) -> dict:
    return {"step": st.step, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps}


def to_bytes(model: SVLFModel) -> bytes:
    header = {
        "grid": model.octree.config.to_dict(),
        "thickness_spec": model.thickness.spec.to_dict(),
        "color_spec": model.color.spec.to_dict(),
        "adam_thickness": _adam_meta(model.adam_thickness),
        "adam_color": _adam_meta(model.adam_color),
    }
    hb = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(hb)))
    buf.write(hb)
    tensors = _tensors(model)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        code = DTYPE_CODES.get(a.dtype.str)
        if code is None:
            raise CheckpointError(f"unsupported dtype {a.dtype} for {name}")
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, a.ndim))
        buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        buf.write(a.tobytes(order="C"))
    return buf.getvalue()


def save_checkpoint(path, model: SVLFModel):
    Path(path).write_bytes(to_bytes(model))


def from_bytes(raw: bytes) -> SVLFModel:
    if raw[:8] != MAGIC:
        raise CheckpointError("not an SVLF checkpoint (bad magic)")
    pos = 8
    (n,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    header = json.loads(raw[pos:pos + n].decode())
    pos += n
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    t = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + ln].decode()
        pos += ln
        code, ndim = struct.unpack_from("<BB", raw, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
        pos += 8 * ndim
        dt = np.dtype(DTYPES[code])
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if pos + size > len(raw):
            raise CheckpointError("truncated checkpoint")
        t[name] = np.frombuffer(raw[pos:pos + size], dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        pos += size

    grid = GridConfig.from_dict(header["grid"])
    octree = SparseOctree.from_leaf_codes(t["octree.leaves"], grid)

    def decoder(prefix, spec):
        k = len(spec.layer_dims)
        return DecoderParams(spec, [t[f"{prefix}.W{i}"].copy() for i in range(k)],
                             [t[f"{prefix}.b{i}"].copy() for i in range(k)])

    ft = decoder("thickness", MlpSpec.from_dict(header["thickness_spec"]))
    fc = decoder("color", MlpSpec.from_dict(header["color_spec"]))
    model = SVLFModel(
        octree,
        FeatureVolume.from_array(t["features.thickness"].copy()),
        FeatureVolume.from_array(t["features.color"].copy()),
        ft, fc,
    )
    for prefix, st in (("adam_thickness", model.adam_thickness), ("adam_color", model.adam_color)):
        meta = header[prefix]
        st.step, st.beta1, st.beta2, st.eps = meta["step"], meta["beta1"], meta["beta2"], meta["eps"]
        for i in range(len(st.m)):
            st.m[i][...] = t[f"{prefix}.m{i}"]
            st.v[i][...] = t[f"{prefix}.v{i}"]
    return model


def load_checkpoint(path) -> SVLFModel:
    return from_bytes(Path(path).read_bytes())
