"""Self-describing binary checkpoint container.

Layout: 8-byte magic, uint32 format version, uint64 header length, a JSON
header (model geometry, head hyperparameters, normalization stats, threshold,
tensor directory), then the raw float64 little-endian tensor payload. Writes
go through a temp file + rename so an interrupted run never leaves a
truncated file that later loads.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .bayes import BayesianHead, Detector
from .model import CnnConfig, FineToCoarseCnn
from .preprocess import NormStats

MAGIC = b"SYDETCK\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """File is not a readable checkpoint of a supported version."""


def _tensor_entries(detector: Detector) -> list[tuple[str, np.ndarray]]:
    entries = [(f"cnn.{name}", p.data) for name, p in detector.cnn.parameters()]
    entries += [(f"cnn.{name}", buf) for name, buf in detector.cnn.buffers()]
    entries += [(f"head.{name}", p.data) for name, p in detector.head.parameters()]
    return entries


def save_checkpoint(path: str | os.PathLike, detector: Detector) -> None:
    entries = _tensor_entries(detector)
    directory = []
    offset = 0
    blobs = []
    for name, arr in entries:
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    cfg = detector.cnn.config
    header = {
        "cnn": {
            "input_size": cfg.input_size, "in_channels": cfg.in_channels,
            "filters": list(cfg.filters), "kernel": cfg.kernel,
            "pool_kernel": cfg.pool_kernel, "pool_stride": cfg.pool_stride,
            "bn_eps": cfg.bn_eps, "bn_momentum": cfg.bn_momentum,
        },
        "head": {
            "d_in": detector.head.d_in, "hidden": detector.head.hidden,
            "alpha": detector.head.alpha, "beta": detector.head.beta,
            "dropout_rate": detector.head.dropout_rate,
        },
        "norm": None if detector.norm is None else {
            "mean": list(detector.norm.mean), "std": list(detector.norm.std)},
        "gamma": detector.gamma,
        "mode": detector.mode,
        "trained": detector.trained,
        "tensors": directory,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", FORMAT_VERSION))
            fh.write(struct.pack("<Q", len(header_bytes)))
            fh.write(header_bytes)
            for blob in blobs:
                fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | os.PathLike) -> Detector:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, = struct.unpack("<I", data[8:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    hlen, = struct.unpack("<Q", data[12:20])
    try:
        header = json.loads(data[20:20 + hlen])
    except ValueError as err:
        raise CheckpointError(f"corrupt checkpoint header: {err}") from err
    payload = data[20 + hlen:]
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 8 * count
        if end > len(payload):
            raise CheckpointError("checkpoint payload truncated")
        tensors[entry["name"]] = np.frombuffer(
            payload[start:end], dtype="<f8").reshape(shape).copy()
    cnn = FineToCoarseCnn(CnnConfig(
        input_size=header["cnn"]["input_size"],
        in_channels=header["cnn"]["in_channels"],
        filters=tuple(header["cnn"]["filters"]),
        kernel=header["cnn"]["kernel"],
        pool_kernel=header["cnn"]["pool_kernel"],
        pool_stride=header["cnn"]["pool_stride"],
        bn_eps=header["cnn"]["bn_eps"],
        bn_momentum=header["cnn"]["bn_momentum"],
    ))
    cnn.load_state_arrays({name[len("cnn."):]: arr for name, arr in tensors.items()
                           if name.startswith("cnn.")})
    head = BayesianHead(
        d_in=header["head"]["d_in"], hidden=header["head"]["hidden"],
        alpha=header["head"]["alpha"], beta=header["head"]["beta"],
        dropout_rate=header["head"]["dropout_rate"])
    for name, p in head.parameters():
        p.assign(tensors[f"head.{name}"])
    norm = None
    if header["norm"] is not None:
        norm = NormStats(mean=tuple(header["norm"]["mean"]),
                         std=tuple(header["norm"]["std"]))
    return Detector(cnn=cnn, head=head, norm=norm, gamma=header["gamma"],
                    mode=header["mode"], trained=header["trained"])
