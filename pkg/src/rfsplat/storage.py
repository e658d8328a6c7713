"""Versioned little-endian binary formats for datasets and model weights.

Dataset file::

    magic b"RFSDSET\\0" | u32 header length | header JSON (utf-8)
    record*  where record = u32 payload length | payload
    payload  = u32 meta length | meta JSON | array blob

Weights file::

    magic b"RFSWGHT\\0" | u32 header length | header JSON | array blob

JSON is written with sorted keys and compact separators and floats in
shortest round-trip form, so reading a record and writing it back
reproduces its bytes.  Arrays are stored raw, little-endian, C order.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .exceptions import CorruptHeaderError, FormatError, TruncatedRecordError, VersionMismatchError
from .features import FeatureMap
from .propagation import PathSet
from .scenes import SceneRecord

DATASET_MAGIC = b"RFSDSET\x00"
WEIGHTS_MAGIC = b"RFSWGHT\x00"
DATASET_VERSION = 1
WEIGHTS_VERSION = 1
_U32 = struct.Struct("<I")
_MAX_HEADER = 64 * 1024 * 1024


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def encode_arrays(arrays: dict):
    """``(meta list, blob)``; arrays in insertion order, little-endian."""
    meta, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        meta.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset,
                     "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return meta, b"".join(chunks)


def decode_arrays(meta, blob) -> dict:
    out = {}
    for m in meta:
        end = m["offset"] + m["nbytes"]
        if end > len(blob):
            raise FormatError(f"array {m['name']!r} runs past the end of its blob")
        arr = np.frombuffer(blob[m["offset"]:end], dtype=np.dtype(m["dtype"]))
        out[m["name"]] = arr.reshape(m["shape"]).copy()
    return out


# dataset ---------------------------------------------------------------------

@dataclass
class DatasetRecord:
    scene: SceneRecord
    features: FeatureMap
    paths: list | None = None  # one PathSet per codebook entry (debug)
    version: int = DATASET_VERSION


def dataset_header(n_rx, n_features, n_configs, rx_shape, materials, extra=None):
    header = {"format": "rfsplat-dataset", "version": DATASET_VERSION, "n_rx": int(n_rx),
              "n_features": int(n_features), "n_configs": int(n_configs), "rx_shape": list(rx_shape),
              "materials": [m.to_dict() if hasattr(m, "to_dict") else m for m in materials]}
    if extra:
        header["extra"] = extra
    return header


_PATH_FIELDS = ("antenna", "length", "azimuth", "elevation", "jones", "kinds", "ids", "ris_panel", "ris_offset")


def _encode_record(rec: DatasetRecord) -> bytes:
    arrays = {"features": np.asarray(rec.features.grid, "<f8")}
    path_meta = []
    for c, ps in enumerate(rec.paths or []):
        for f in _PATH_FIELDS:
            arrays[f"paths{c}.{f}"] = getattr(ps, f)
        path_meta.append({"n_rx": int(ps.n_rx), "entry_index": ps.entry_index})
    meta_arrays, blob = encode_arrays(arrays)
    meta = {"scene": rec.scene.to_dict(), "scene_id": rec.features.scene_id,
            "entry_ids": list(rec.features.entry_ids), "rx_shape": list(rec.features.rx_shape),
            "arrays": meta_arrays, "paths": path_meta}
    mj = _dumps(meta)
    return _U32.pack(len(mj)) + mj + blob


def _decode_record(payload: bytes, index: int) -> DatasetRecord:
    if len(payload) < 4:
        raise FormatError(f"record {index}: payload too short")
    (mlen,) = _U32.unpack_from(payload)
    try:
        meta = json.loads(payload[4:4 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"record {index}: unreadable metadata ({e})") from None
    arrays = decode_arrays(meta["arrays"], payload[4 + mlen:])
    fm = FeatureMap(arrays["features"], meta["scene_id"], tuple(meta["entry_ids"]), tuple(meta["rx_shape"]))
    paths = None
    if meta["paths"]:
        paths = []
        for c, pm in enumerate(meta["paths"]):
            fields = {f: arrays[f"paths{c}.{f}"] for f in _PATH_FIELDS}
            paths.append(PathSet(**fields, n_rx=pm["n_rx"], entry_index=pm["entry_index"]))
    return DatasetRecord(SceneRecord.from_dict(meta["scene"]), fm, paths)


def _read_exact(fh, n):
    data = fh.read(n)
    return data if data is not None else b""


def _read_header(fh, magic, kind, supported):
    got = _read_exact(fh, len(magic))
    if got != magic:
        raise CorruptHeaderError(f"not an rfsplat {kind} file (bad magic {got!r})")
    raw_len = _read_exact(fh, 4)
    if len(raw_len) < 4:
        raise CorruptHeaderError(f"{kind} header length missing")
    (hlen,) = _U32.unpack(raw_len)
    if hlen > _MAX_HEADER:
        raise CorruptHeaderError(f"{kind} header length {hlen} is implausible")
    raw = _read_exact(fh, hlen)
    if len(raw) < hlen:
        raise CorruptHeaderError(f"{kind} header truncated ({len(raw)} of {hlen} bytes)")
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptHeaderError(f"{kind} header is not valid JSON ({e})") from None
    if not isinstance(header, dict) or "version" not in header:
        raise CorruptHeaderError(f"{kind} header lacks a version tag")
    if header["version"] not in supported:
        raise VersionMismatchError(f"{kind} version {header['version']} not supported (expected {supported})")
    return header


class DatasetWriter:
    """Append-only, single-writer dataset file."""

    def __init__(self, path, header: dict):
        self.path = path
        self.header = header
        self.count = 0
        self._fh = open(path, "wb")
        hj = _dumps(header)
        self._fh.write(DATASET_MAGIC + _U32.pack(len(hj)) + hj)

    def write(self, rec: DatasetRecord):
        grid = rec.features.grid
        expect = (self.header["n_rx"], self.header["n_features"] * self.header["n_configs"])
        if tuple(grid.shape) != expect:
            raise FormatError(f"feature shape {grid.shape} does not match header {expect}")
        payload = _encode_record(rec)
        self._fh.write(_U32.pack(len(payload)) + payload)
        self.count += 1

    def close(self):
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class DatasetReader:
    """Streaming reader; iterating yields one ``DatasetRecord`` at a time."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "rb")
        try:
            self.header = _read_header(self._fh, DATASET_MAGIC, "dataset", (DATASET_VERSION,))
            for key in ("n_rx", "n_features", "n_configs", "materials"):
                if key not in self.header:
                    raise CorruptHeaderError(f"dataset header lacks {key!r}")
        except Exception:
            self._fh.close()
            raise

    def __iter__(self):
        index = 0
        while True:
            raw_len = _read_exact(self._fh, 4)
            if not raw_len:
                return
            if len(raw_len) < 4:
                raise TruncatedRecordError(f"record {index}: length prefix truncated", index)
            (n,) = _U32.unpack(raw_len)
            payload = _read_exact(self._fh, n)
            if len(payload) < n:
                raise TruncatedRecordError(f"record {index}: expected {n} bytes, found {len(payload)}", index)
            rec = _decode_record(payload, index)
            expect = (self.header["n_rx"], self.header["n_features"] * self.header["n_configs"])
            if tuple(rec.features.grid.shape) != expect:
                raise FormatError(f"record {index}: feature shape {rec.features.grid.shape} != header {expect}")
            yield rec
            index += 1

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_dataset(path, records, header):
    with DatasetWriter(path, header) as w:
        for rec in records:
            w.write(rec)
    return w.count


def read_dataset(path):
    """``(header, [DatasetRecord, ...])``."""
    with DatasetReader(path) as r:
        return r.header, list(r)


# weights ---------------------------------------------------------------------

def save_weights(path, estimator, extra=None):
    """Serialize a fitted ``SphereDETR``: config header, estimator
    parameters, standardizer statistics and every network tensor."""
    estimator._check_fitted()
    state = estimator.module_.state_dict()
    arrays = {f"param.{k}": v.detach().cpu().numpy() for k, v in state.items()}
    arrays["standardizer.mean"] = estimator.standardizer_.mean_
    arrays["standardizer.scale"] = estimator.standardizer_.scale_
    meta, blob = encode_arrays(arrays)
    params = estimator.get_params()
    params["bounds"] = [list(b) for b in params["bounds"]]
    params["radius_range"] = list(params["radius_range"])
    params["grid"] = list(params["grid"])
    header = {"format": "rfsplat-weights", "version": WEIGHTS_VERSION, "model_config": estimator.config_.to_dict(),
              "estimator": params, "standardizer_eps": estimator.standardizer_.eps, "arrays": meta,
              "history": [{k: v for k, v in e.items() if k != "seconds"} for e in getattr(estimator, "history_", [])],
              "extra": extra or {}}
    hj = _dumps(header)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(WEIGHTS_MAGIC + _U32.pack(len(hj)) + hj + blob)
    os.replace(tmp, path)
    return path


def load_weights(path):
    """Rebuild the estimator saved by ``save_weights``; returns
    ``(estimator, header)``."""
    import torch

    from .features import FeatureStandardizer
    from .model import ModelConfig, SphereDETR

    with open(path, "rb") as fh:
        header = _read_header(fh, WEIGHTS_MAGIC, "weights", (WEIGHTS_VERSION,))
        blob = fh.read()
    try:
        cfg = ModelConfig.from_dict(header["model_config"])
        params = dict(header["estimator"])
    except (KeyError, TypeError) as e:
        raise CorruptHeaderError(f"weights header incomplete ({e})") from None
    params["bounds"] = tuple(tuple(b) for b in params["bounds"])
    params["radius_range"] = tuple(params["radius_range"])
    params["grid"] = tuple(params["grid"])
    total = sum(m["nbytes"] for m in header["arrays"])
    if len(blob) < total:
        raise TruncatedRecordError(f"weights blob truncated ({len(blob)} of {total} bytes)", None)
    arrays = decode_arrays(header["arrays"], blob)
    est = SphereDETR(**params)
    est.build(cfg.in_channels, cfg.n_classes)
    if est.config_ != cfg:
        raise CorruptHeaderError("model config does not match estimator parameters")
    dtype = est._torch_dtype()
    state = {k[len("param."):]: torch.tensor(v) for k, v in arrays.items() if k.startswith("param.")}
    est.module_.load_state_dict({k: v.to(dtype) if v.is_floating_point() else v for k, v in state.items()})
    std = FeatureStandardizer(eps=header.get("standardizer_eps", 1e-12))
    std.mean_ = arrays["standardizer.mean"]
    std.scale_ = arrays["standardizer.scale"]
    std.n_features_in_ = len(std.mean_)
    est.standardizer_ = std
    est.n_features_in_ = std.n_features_in_
    est.history_ = header.get("history", [])
    return est, header


# simulation output (paths + received samples, input to feature extraction) ----

SIMULATION_MAGIC = b"RFSSIMU\x00"
SIMULATION_VERSION = 1


@dataclass
class SimulationRecord:
    scene: SceneRecord
    scene_id: int
    paths: list  # PathSet per codebook entry
    wavefronts: np.ndarray  # (C, N_r, 2, 2) complex, noise included


def _encode_simulation(rec: SimulationRecord) -> bytes:
    arrays = {"wavefronts": np.asarray(rec.wavefronts, "<c16")}
    path_meta = []
    for c, ps in enumerate(rec.paths):
        for f in _PATH_FIELDS:
            arrays[f"paths{c}.{f}"] = getattr(ps, f)
        path_meta.append({"n_rx": int(ps.n_rx), "entry_index": ps.entry_index})
    meta_arrays, blob = encode_arrays(arrays)
    mj = _dumps({"scene": rec.scene.to_dict(), "scene_id": int(rec.scene_id), "arrays": meta_arrays,
                 "paths": path_meta})
    return _U32.pack(len(mj)) + mj + blob


def _decode_simulation(payload: bytes, index: int) -> SimulationRecord:
    (mlen,) = _U32.unpack_from(payload)
    try:
        meta = json.loads(payload[4:4 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"record {index}: unreadable metadata ({e})") from None
    arrays = decode_arrays(meta["arrays"], payload[4 + mlen:])
    paths = [PathSet(**{f: arrays[f"paths{c}.{f}"] for f in _PATH_FIELDS}, n_rx=pm["n_rx"],
                     entry_index=pm["entry_index"]) for c, pm in enumerate(meta["paths"])]
    return SimulationRecord(SceneRecord.from_dict(meta["scene"]), meta["scene_id"], paths, arrays["wavefronts"])


def write_simulation(path, header, records):
    header = {"format": "rfsplat-simulation", "version": SIMULATION_VERSION, **header}
    hj = _dumps(header)
    n = 0
    with open(path, "wb") as fh:
        fh.write(SIMULATION_MAGIC + _U32.pack(len(hj)) + hj)
        for rec in records:
            payload = _encode_simulation(rec)
            fh.write(_U32.pack(len(payload)) + payload)
            n += 1
    return n


def iter_simulation(path):
    """``(header, record iterator)``; records stream one at a time."""
    fh = open(path, "rb")
    try:
        header = _read_header(fh, SIMULATION_MAGIC, "simulation", (SIMULATION_VERSION,))
    except Exception:
        fh.close()
        raise

    def records():
        with fh:
            index = 0
            while True:
                raw_len = _read_exact(fh, 4)
                if not raw_len:
                    return
                if len(raw_len) < 4:
                    raise TruncatedRecordError(f"record {index}: length prefix truncated", index)
                (n,) = _U32.unpack(raw_len)
                payload = _read_exact(fh, n)
                if len(payload) < n:
                    raise TruncatedRecordError(f"record {index}: expected {n} bytes, found {len(payload)}", index)
                yield _decode_simulation(payload, index)
                index += 1

    return header, records()


# scenes as JSON lines -------------------------------------------------------------

def write_scenes(path, scenes):
    with open(path, "w") as fh:
        for s in scenes:
            fh.write(_dumps(s.to_dict()).decode("utf-8") + "\n")
    return path


def read_scenes(path):
    out = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                out.append(SceneRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise FormatError(f"{path}: scene line {i + 1} unreadable ({e})") from None
    return out
