"""Binary artifact formats and atomic file writes.

``RBNGRID1`` (grid values) layout, all little-endian::

    8s   magic "RBNGRID1"
    u32  ndim
    per dim: f64 min, f64 max, u32 count, u8 periodic
    f64  tau
    f64  gamma
    u32  length of UTF-8 JSON provenance block, then the block
    f64[prod(counts)] values, row-major

``RBNNET1`` (network checkpoint)::

    8s   magic "RBNNET1\\0"
    u32  length of UTF-8 JSON header, then the header
    f64 blocks for each weight then bias, layer by layer, as listed in the header
"""
from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from . import __version__
from .dynamics import make_system
from .grid_solver import Grid, GridValue
from .network import MLPParams, ValueNet, _DTYPES

GRID_MAGIC = b"RBNGRID1"
NET_MAGIC = b"RBNNET1\x00"


class FormatError(ValueError):
    pass


def atomic_write(path, data: bytes | str) -> Path:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _dump_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


# -- grid files ---------------------------------------------------------
def grid_to_bytes(V: GridValue) -> bytes:
    g = V.grid
    parts = [GRID_MAGIC, struct.pack("<I", g.ndim)]
    for lo, hi, c, p in zip(g.mins, g.maxs, g.counts, g.periodic):
        parts.append(struct.pack("<ddIB", lo, hi, c, int(p)))
    parts.append(struct.pack("<dd", V.time, V.gamma))
    meta = _dump_json({"version": __version__, **V.meta})
    parts.append(struct.pack("<I", len(meta)))
    parts.append(meta)
    parts.append(np.ascontiguousarray(V.values, dtype="<f8").tobytes())
    return b"".join(parts)


def grid_from_bytes(data: bytes) -> GridValue:
    buf = io.BytesIO(data)
    if buf.read(8) != GRID_MAGIC:
        raise FormatError("not an RBNGRID1 file")
    (ndim,) = struct.unpack("<I", buf.read(4))
    mins, maxs, counts, periodic = [], [], [], []
    for _ in range(ndim):
        lo, hi, c, p = struct.unpack("<ddIB", buf.read(21))
        mins.append(lo)
        maxs.append(hi)
        counts.append(c)
        periodic.append(bool(p))
    tau, gamma = struct.unpack("<dd", buf.read(16))
    (mlen,) = struct.unpack("<I", buf.read(4))
    meta = json.loads(buf.read(mlen).decode("utf-8"))
    grid = Grid(tuple(mins), tuple(maxs), tuple(counts), tuple(periodic))
    n = int(np.prod(counts))
    raw = buf.read(8 * n)
    if len(raw) != 8 * n:
        raise FormatError("truncated grid file")
    values = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(grid.shape)
    return GridValue(grid, values, time=tau, gamma=gamma, meta=meta)


def write_grid(path, V: GridValue) -> Path:
    return atomic_write(path, grid_to_bytes(V))


def read_grid(path) -> GridValue:
    return grid_from_bytes(Path(path).read_bytes())


# -- network checkpoints ------------------------------------------------
def net_to_bytes(net: ValueNet, extra: dict | None = None) -> bytes:
    p = net.params
    header = net.metadata()
    header["version"] = __version__
    header["layers"] = [
        {"weight": list(W.shape), "bias": list(b.shape)} for W, b in zip(p.weights, p.biases)
    ]
    if extra:
        header["extra"] = extra
    hb = _dump_json(header)
    blocks = [
        t.detach().to(torch.float64).contiguous().numpy().astype("<f8").tobytes()
        for t in p.tensors()
    ]
    return b"".join([NET_MAGIC, struct.pack("<I", len(hb)), hb, *blocks])


def net_from_bytes(data: bytes) -> tuple[ValueNet, dict]:
    buf = io.BytesIO(data)
    if buf.read(8) != NET_MAGIC:
        raise FormatError("not an RBNNET1 checkpoint")
    (hlen,) = struct.unpack("<I", buf.read(4))
    header = json.loads(buf.read(hlen).decode("utf-8"))
    dtype = _DTYPES[header["dtype"]]
    weights, biases = [], []
    for layer in header["layers"]:
        for shape, dest in ((layer["weight"], weights), (layer["bias"], biases)):
            n = int(np.prod(shape))
            raw = buf.read(8 * n)
            if len(raw) != 8 * n:
                raise FormatError("truncated checkpoint")
            arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
            dest.append(torch.tensor(arr, dtype=dtype))
    sysconf = dict(header["system"])
    system = make_system(sysconf.pop("name"), **sysconf)
    params = MLPParams(weights, biases, header["omega0"])
    net = ValueNet(
        params, system, header["t_f"], header["gamma_range"],
        header["state_lower"], header["state_upper"],
    )
    return net, header


def write_checkpoint(path, net: ValueNet, extra: dict | None = None) -> Path:
    return atomic_write(path, net_to_bytes(net, extra))


def read_checkpoint(path) -> tuple[ValueNet, dict]:
    return net_from_bytes(Path(path).read_bytes())


# -- CSV ----------------------------------------------------------------
def csv_text(header: Sequence[str], rows: Iterable[Sequence], config: dict | None = None) -> str:
    """CSV with an optional leading ``# config: {...}`` provenance line."""
    out = io.StringIO()
    if config is not None:
        out.write("# config: " + json.dumps(config, sort_keys=True) + "\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return out.getvalue()


def write_csv(path, header, rows, config: dict | None = None) -> Path:
    return atomic_write(path, csv_text(header, rows, config))


def read_csv(path) -> tuple[dict | None, list[dict]]:
    config = None
    lines = Path(path).read_text().splitlines()
    if lines and lines[0].startswith("# config: "):
        config = json.loads(lines[0][len("# config: "):])
        lines = lines[1:]
    return config, list(csv.DictReader(lines))


def write_json(path, obj) -> Path:
    return atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")
