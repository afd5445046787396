"""Binary checkpoint format.

Layout (little-endian):
  magic   8 bytes  b"BAACKPT1"
  version u16
  fingerprint 32 bytes (sha256 of the canonical run config)
  count   u32
  count entries of:
    name_len u16, name UTF-8, rank u8, dims u32[rank], payload f32[prod(dims)]
  trailer: epoch u32, final_lr f64

Parameters are stored as float32; batch-norm running stats ride along in the
same framing. Quantisation is idempotent, so save -> load -> save is stable
byte for byte.
"""

import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .model import Model, ModelConfig, N_BLOCKS

MAGIC = b"BAACKPT1"
VERSION = 1


@dataclass
class Checkpoint:
    fingerprint: bytes
    tensors: dict  # name -> np.float32 array
    epoch: int
    final_lr: float


def model_state(model):
    """Named tensors to persist: parameters then running stats."""
    state = {name: t.data for name, t in model.named_parameters().items()}
    state.update(model.running_stats())
    return state


def save_bytes(state, fingerprint=b"\x00" * 32, epoch=0, final_lr=0.0):
    if len(fingerprint) != 32:
        raise FormatError("fingerprint must be 32 bytes")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    buf.write(fingerprint)
    buf.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype("<f4").tobytes())
    buf.write(struct.pack("<I", epoch))
    buf.write(struct.pack("<d", final_lr))
    return buf.getvalue()


def save(path, state, fingerprint=b"\x00" * 32, epoch=0, final_lr=0.0):
    with open(path, "wb") as f:
        f.write(save_bytes(state, fingerprint, epoch, final_lr))


def load_bytes(data):
    if data[:8] != MAGIC:
        raise FormatError(f"bad checkpoint magic {data[:8]!r}")
    pos = 8
    (version,) = struct.unpack_from("<H", data, pos)
    pos += 2
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    fingerprint = data[pos:pos + 32]
    pos += 32
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<B", data, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(dims)
        pos += 4 * n
        tensors[name] = arr.copy()
    (epoch,) = struct.unpack_from("<I", data, pos)
    pos += 4
    (final_lr,) = struct.unpack_from("<d", data, pos)
    return Checkpoint(fingerprint, tensors, epoch, final_lr)


def load(path):
    with open(path, "rb") as f:
        return load_bytes(f.read())


def infer_config(tensors):
    """Reconstruct the ModelConfig from checkpoint tensor names and shapes.

    The dropout rate is not persisted (irrelevant in eval mode) and comes
    back as the default.
    """
    convs = 0
    while f"block1.conv{convs + 1}.weight" in tensors:
        convs += 1
    if convs == 0:
        raise FormatError("checkpoint lacks backbone parameters")
    channels = [int(tensors[f"block{b}.conv1.weight"].shape[0])
                for b in range(1, N_BLOCKS + 1)]
    conn_blocks = sorted(
        int(name.split(".")[1][5:])
        for name in tensors
        if name.startswith("conn.block") and name.endswith(".fc.weight")
    )
    n_units = int(tensors[f"conn.block{conn_blocks[0]}.fc.weight"].shape[0]) if conn_blocks else 64
    head_dims = [int(tensors["head.fc1.weight"].shape[0]),
                 int(tensors["head.fc2.weight"].shape[0])]
    global_width = int(tensors["head.fc1.weight"].shape[1]) - n_units * len(conn_blocks)
    side5 = int(round(np.sqrt(global_width / channels[-1])))
    if channels[-1] * side5 * side5 != global_width:
        raise FormatError("cannot infer input size from head width")
    input_size = side5 * 2 ** N_BLOCKS
    global_pool = bool(
        conn_blocks
        and tensors[f"conn.block{conn_blocks[0]}.fc.weight"].shape[1]
        == channels[conn_blocks[0] - 1]
    )
    return ModelConfig(
        input_size=input_size,
        block_channels=channels,
        convs_per_block=convs,
        connection_blocks=conn_blocks,
        n_units=n_units,
        head_dims=head_dims,
        global_pool_connections=global_pool,
    )


def restore_model(ckpt, config=None):
    """Build a Model and load checkpoint tensors into it (f32 -> f64)."""
    model = Model(config or infer_config(ckpt.tensors), seed=0)
    apply_state(model, ckpt.tensors)
    return model


def apply_state(model, tensors):
    params = model.named_parameters()
    for name, t in params.items():
        if name not in tensors:
            raise FormatError(f"checkpoint missing parameter {name}")
        if tuple(tensors[name].shape) != tuple(t.data.shape):
            raise FormatError(f"shape mismatch for {name}")
        t.data = tensors[name].astype(np.float64)
    for b, stages in enumerate(model.blocks, start=1):
        for j, (_, bn) in enumerate(stages, start=1):
            bn.running_mean = tensors[f"block{b}.bn{j}.running_mean"].astype(np.float64)
            bn.running_var = tensors[f"block{b}.bn{j}.running_var"].astype(np.float64)
