"""Binary checkpoints: configuration, kernel geometry, parameters, optimizer and RNG state.

Layout: the magic bytes ``OCTSPHCK``, a little-endian ``u32`` format version,
then tagged sections ``tag(4 bytes) | u64 length | payload``:

``CONF``  network and training config as ``key = value`` text
``GEOM``  ``n p q`` (u32), radial edges and radius (f64)
``PARM``  named parameter tensors
``BUFS``  named batch-norm running statistics
``OPTM``  epoch (u32), then the named momentum buffers
``RNGS``  bit-generator state as sorted-key JSON

A tensor record is ``u16 name length | name | dtype code | u8 ndim | u32 dims | data``
with dtype code ``f4`` or ``f8``. Parameters are written as 32-bit floats unless
the network runs in 64 bits. Writing is deterministic, so save, load and save
again yields identical bytes.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, build_configs, format_config, parse_config_text
from .kernel import KernelGeometry, make_geometry
from .network import Network, NetworkConfig
from .training import SGD, TrainConfig, TrainState

MAGIC = b"OCTSPHCK"
VERSION = 1
_SECTIONS = (b"CONF", b"GEOM", b"PARM", b"BUFS", b"OPTM", b"RNGS")


class CheckpointError(ValueError):
    pass


class ConfigMismatchError(CheckpointError):
    """The checkpoint was written for a different network configuration."""


@dataclass
class Checkpoint:
    net: Network
    train_config: TrainConfig
    state: TrainState


# -- tensors -----------------------------------------------------------------

def _write_tensor(buf, name: str, arr: np.ndarray):
    code = {np.dtype(np.float32): b"f4", np.dtype(np.float64): b"f8"}.get(arr.dtype)
    if code is None:
        raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
    raw = name.encode()
    buf.write(struct.pack("<H", len(raw)) + raw + code)
    buf.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def _read_tensor(view: memoryview, pos: int):
    (nlen,) = struct.unpack_from("<H", view, pos)
    pos += 2
    name = bytes(view[pos:pos + nlen]).decode()
    pos += nlen
    code = bytes(view[pos:pos + 2])
    if code not in (b"f4", b"f8"):
        raise CheckpointError(f"{name}: unknown dtype code {code!r}")
    (ndim,) = struct.unpack_from("<B", view, pos + 2)
    shape = struct.unpack_from(f"<{ndim}I", view, pos + 3)
    pos += 3 + 4 * ndim
    dtype = np.dtype("<" + code.decode())
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if pos + nbytes > len(view):
        raise CheckpointError(f"{name}: truncated tensor data")
    arr = np.frombuffer(view[pos:pos + nbytes], dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return name, arr, pos + nbytes


def _tensor_section(items) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(items)))
    for name, arr in items:
        _write_tensor(buf, name, arr)
    return buf.getvalue()


def _read_tensor_section(payload: bytes, pos=0) -> dict:
    view = memoryview(payload)
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    out = {}
    for _ in range(count):
        name, arr, pos = _read_tensor(view, pos)
        out[name] = arr
    if pos != len(payload):
        raise CheckpointError("trailing bytes in tensor section")
    return out


# -- geometry and rng ----------------------------------------------------------

def _geometry_bytes(g: KernelGeometry) -> bytes:
    return struct.pack("<3I", g.n, g.p, g.q) + np.asarray(g.r_edges, "<f8").tobytes() + struct.pack("<d", g.rho)


def _geometry_from(payload: bytes) -> KernelGeometry:
    n, p, q = struct.unpack_from("<3I", payload, 0)
    if len(payload) != 12 + 8 * (q + 2):
        raise CheckpointError("geometry section has the wrong size")
    edges = np.frombuffer(payload, "<f8", q + 1, 12).astype(np.float64)
    (rho,) = struct.unpack_from("<d", payload, 12 + 8 * (q + 1))
    return make_geometry(n, p, q, rho, radial_edges=edges)


def _rng_from(state: dict) -> np.random.Generator:
    try:
        bitgen = getattr(np.random, state["bit_generator"])()
    except (KeyError, AttributeError) as exc:
        raise CheckpointError(f"unknown bit generator in checkpoint: {exc}") from exc
    bitgen.state = state
    return np.random.Generator(bitgen)


# -- public API ----------------------------------------------------------------

def to_bytes(net: Network, train_config: TrainConfig | None = None, state: TrainState | None = None) -> bytes:
    train_config = train_config or TrainConfig()
    state = state or TrainState()
    dtype = np.float64 if net.dtype == np.float64 else np.float32
    params = [(name, p.astype(dtype, copy=False)) for name, p, _ in net.parameters()]
    buffers = [(name, layer.buffers[k]) for name, layer, k in net.buffers()]
    velocity = state.optimizer.velocity if state.optimizer is not None else {}
    optim = struct.pack("<I", state.epoch) + _tensor_section(sorted(velocity.items()))
    rng_state = state.rng.bit_generator.state if state.rng is not None else {}
    sections = {
        b"CONF": format_config(net.config, train_config).encode(),
        b"GEOM": _geometry_bytes(net.geometry),
        b"PARM": _tensor_section(params),
        b"BUFS": _tensor_section(buffers),
        b"OPTM": optim,
        b"RNGS": json.dumps(rng_state, sort_keys=True).encode(),
    }
    out = io.BytesIO()
    out.write(MAGIC + struct.pack("<I", VERSION))
    for tag in _SECTIONS:
        out.write(tag + struct.pack("<Q", len(sections[tag])) + sections[tag])
    return out.getvalue()


def _split_sections(data: bytes) -> dict:
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    pos = len(MAGIC)
    if len(data) < pos + 4:
        raise CheckpointError("truncated checkpoint header")
    (version,) = struct.unpack_from("<I", data, pos)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos += 4
    sections = {}
    while pos < len(data):
        if pos + 12 > len(data):
            raise CheckpointError("truncated section header")
        tag = data[pos:pos + 4]
        (length,) = struct.unpack_from("<Q", data, pos + 4)
        pos += 12
        if pos + length > len(data):
            raise CheckpointError(f"section {tag!r} is truncated")
        sections[tag] = data[pos:pos + length]
        pos += length
    missing = [t.decode() for t in _SECTIONS if t not in sections]
    if missing:
        raise CheckpointError(f"missing sections: {', '.join(missing)}")
    return sections


def from_bytes(data: bytes, expect: NetworkConfig | None = None) -> Checkpoint:
    """Rebuild network, training config and state.

    ``expect`` raises :class:`ConfigMismatchError` when it differs from the
    stored network configuration.
    """
    s = _split_sections(data)
    try:
        net_cfg, train_cfg = build_configs(parse_config_text(s[b"CONF"].decode()))
    except (ConfigError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"bad config section: {exc}") from exc
    if expect is not None and expect != net_cfg:
        diff = [k for k, v in expect.to_dict().items() if net_cfg.to_dict()[k] != v]
        raise ConfigMismatchError(f"checkpoint network config differs in: {', '.join(diff)}")
    geometry = _geometry_from(s[b"GEOM"])
    if (geometry.n, geometry.p, geometry.q) != net_cfg.kernel:
        raise CheckpointError("geometry section disagrees with the kernel in the config")
    params = _read_tensor_section(s[b"PARM"])
    dtype = next(iter(params.values())).dtype if params else np.float32
    net = Network(net_cfg, np.random.default_rng(0), dtype, geometry=geometry)
    for name, p, _ in net.parameters():
        if name not in params or params[name].shape != p.shape:
            raise CheckpointError(f"parameter {name} missing or with the wrong shape")
        p[...] = params.pop(name)
    if params:
        raise CheckpointError(f"unexpected parameters: {sorted(params)}")
    bufs = _read_tensor_section(s[b"BUFS"])
    for name, layer, k in net.buffers():
        if name not in bufs or bufs[name].shape != layer.buffers[k].shape:
            raise CheckpointError(f"buffer {name} missing or with the wrong shape")
        layer.buffers[k][...] = bufs[name]
    (epoch,) = struct.unpack_from("<I", s[b"OPTM"], 0)
    optimizer = SGD(train_cfg.momentum)
    optimizer.velocity = _read_tensor_section(s[b"OPTM"], 4)
    rng_state = json.loads(s[b"RNGS"])
    rng = _rng_from(rng_state) if rng_state else None
    return Checkpoint(net, train_cfg, TrainState(epoch, optimizer, rng))


def save_checkpoint(path, net, train_config=None, state=None) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(net, train_config, state))
    return path


def load_checkpoint(path, expect: NetworkConfig | None = None) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), expect)
