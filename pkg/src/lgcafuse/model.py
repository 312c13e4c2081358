"""The attention-pooled convolutional autoencoder: init, training, checkpoints.

Architecture: three encoder stages (3x3 conv, stride 1, pad 1, ReLU, then the
configured pooling) with channel plan 1 -> 64 -> 128 -> 256, and three decoder
stages (2x2 transposed conv, stride 2) with plan 256 -> 128 -> 64 -> 1, ReLU
after the first two and tanh after the last.  An input (n, 1, H, W) with H, W
divisible by 8 maps to a (n, 256, H/8, W/8) code and back to (n, 1, H, W).

Checkpoint wire format (little-endian):
  magic "LGCA" | u32 format version | u8 pooling mode | u32 tensor count
  per tensor: u16 name length, UTF-8 name, u8 rank, rank x u64 dims, raw f32
  footer: u32 CRC32 of all preceding bytes
Training metadata (epochs, final loss, seed, config hash, tool version) is
carried as reserved "meta.*" tensors; 64-bit integers are split into 16-bit
limbs so float32 stores them exactly.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .attention import (
    LGCALayerParams,
    PoolingMode,
    fan_in_uniform,
    init_lgca_layer,
    pool_dispatch,
)
from .conv import ConvParams, conv2d, conv_transpose2d
from .errors import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    DataError,
)
from .tensor import Tensor, mse_loss, relu, tanh

ENCODER_CHANNELS = (1, 64, 128, 256)
DECODER_CHANNELS = (256, 128, 64, 1)

CHECKPOINT_MAGIC = b"LGCA"
CHECKPOINT_VERSION = 1
_MODE_BYTES = {PoolingMode.LGCA: 0, PoolingMode.AVERAGE: 1, PoolingMode.MAX: 2}
_BYTE_MODES = {b: m for m, b in _MODE_BYTES.items()}


@dataclass
class CAEModel:
    pooling_mode: PoolingMode
    enc_convs: list[ConvParams]
    lgca_layers: list[LGCALayerParams] | None
    dec_convs: list[ConvParams]
    seed: int = 0
    epochs_completed: int = 0
    final_loss: float = 0.0
    config_hash: int = 0

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """All learnable tensors in a fixed order (the checkpoint order)."""
        out = []
        for i, p in enumerate(self.enc_convs, start=1):
            out.append((f"encoder.{i}.conv.weight", p.weight))
            out.append((f"encoder.{i}.conv.bias", p.bias))
            if self.lgca_layers is not None:
                out.extend(self.lgca_layers[i - 1].named_tensors(f"encoder.{i}.pool"))
        for i, p in enumerate(self.dec_convs, start=1):
            out.append((f"decoder.{i}.weight", p.weight))
            out.append((f"decoder.{i}.bias", p.bias))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def encode(self, x: Tensor) -> Tensor:
        """(n, 1, H, W) -> (n, 256, H/8, W/8); H and W must be divisible by 8."""
        if x.shape[2] % 8 or x.shape[3] % 8:
            raise ValueError(f"encode: spatial dims must be divisible by 8, got {x.shape[2]}x{x.shape[3]}")
        for i, conv in enumerate(self.enc_convs):
            x = relu(conv2d(x, conv))
            params = self.lgca_layers[i] if self.lgca_layers is not None else None
            x = pool_dispatch(x, self.pooling_mode, params)
        return x

    def decode(self, e: Tensor) -> Tensor:
        """(n, 256, h, w) -> (n, 1, 8h, 8w) through ReLU/ReLU/tanh deconvs."""
        if e.shape[1] != DECODER_CHANNELS[0]:
            raise ValueError(f"decode: expected {DECODER_CHANNELS[0]} channels, got {e.shape[1]}")
        for i, deconv in enumerate(self.dec_convs):
            e = conv_transpose2d(e, deconv)
            e = tanh(e) if i == len(self.dec_convs) - 1 else relu(e)
        return e

    def reconstruct(self, x: Tensor) -> Tensor:
        return self.decode(self.encode(x))


def init_model(seed: int, pooling_mode: PoolingMode, dtype=np.float32) -> CAEModel:
    """Build a model with fan-in-scaled uniform weights and zero biases.

    The draw order is fixed, so equal seeds give bit-identical models.
    """
    mode = PoolingMode(pooling_mode)
    rng = np.random.default_rng(seed)
    enc, lgca = [], ([] if mode is PoolingMode.LGCA else None)
    for c_in, c_out in zip(ENCODER_CHANNELS, ENCODER_CHANNELS[1:]):
        enc.append(ConvParams(
            weight=fan_in_uniform(rng, (c_out, c_in, 3, 3), c_in * 9, dtype),
            bias=Tensor(np.zeros((1, c_out, 1, 1), dtype=dtype), requires_grad=True),
            stride=1,
            padding=1,
        ))
        if lgca is not None:
            lgca.append(init_lgca_layer(rng, c_out, dtype=dtype))
    dec = []
    for c_in, c_out in zip(DECODER_CHANNELS, DECODER_CHANNELS[1:]):
        dec.append(ConvParams(
            weight=fan_in_uniform(rng, (c_out, c_in, 2, 2), c_in * 4, dtype),
            bias=Tensor(np.zeros((1, c_out, 1, 1), dtype=dtype), requires_grad=True),
            stride=2,
            padding=0,
        ))
    return CAEModel(pooling_mode=mode, enc_convs=enc, lgca_layers=lgca, dec_convs=dec, seed=seed)


# -- optimizer ----------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ValueError("epochs, batch_size and learning_rate must be positive")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params])


def adam_step(params: list[Tensor], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update in place; a None grad counts as zero."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def train(model: CAEModel, patches: np.ndarray, cfg: TrainConfig,
          on_epoch=None) -> list[float]:
    """Minimize reconstruction MSE over shuffled mini-batches.

    `patches` is (N, 1, h, w) with h, w divisible by 8 and values in [-1, 1];
    the last incomplete batch is kept.  Returns the per-epoch mean loss and
    updates the model's training metadata.  `on_epoch(index, mean_loss)` is
    invoked after every epoch when given.
    """
    data = np.ascontiguousarray(patches, dtype=model.enc_convs[0].weight.dtype)
    if data.ndim != 4 or data.shape[0] == 0:
        raise DataError(f"training set must be a non-empty (N, 1, h, w) array, got shape {data.shape}")
    if data.shape[1] != 1:
        raise DataError(f"training patches must be single-channel, got {data.shape[1]} channels")
    if data.shape[2] % 8 or data.shape[3] % 8:
        raise DataError(f"patch dims must be divisible by 8, got {data.shape[2]}x{data.shape[3]}")
    if data.min() < -1.0 or data.max() > 1.0:
        raise DataError("patch values must lie in [-1, 1]")

    params = model.parameters()
    state = AdamState.for_params(params)
    rng = np.random.default_rng(cfg.seed)
    n = data.shape[0]
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        total, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = Tensor(data[idx])
            loss = mse_loss(model.reconstruct(batch), batch)
            for p in params:
                p.zero_grad()
            loss.backward()
            adam_step(params, state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
            total += loss.item() * len(idx)
            seen += len(idx)
        history.append(total / seen)
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
    model.epochs_completed += cfg.epochs
    model.final_loss = history[-1]
    return history


# -- checkpoint persistence ----------------------------------------------------


def _limbs(value: int) -> np.ndarray:
    return np.array([(int(value) >> (16 * i)) & 0xFFFF for i in range(4)], dtype=np.float32)


def _from_limbs(arr: np.ndarray) -> int:
    return sum(int(round(float(x))) << (16 * i) for i, x in enumerate(arr))


def _meta_tensors(model: CAEModel) -> list[tuple[str, np.ndarray]]:
    ver = np.array([int(x) for x in __version__.split(".")[:3]], dtype=np.float32)
    return [
        ("meta.train", np.array([model.epochs_completed, model.final_loss], dtype=np.float32)),
        ("meta.seed", _limbs(model.seed)),
        ("meta.config_hash", _limbs(model.config_hash)),
        ("meta.tool_version", ver),
    ]


def save_checkpoint(model: CAEModel, path) -> None:
    """Write the model in the wire format described in the module docstring."""
    entries = [(name, t.data.astype(np.float32, copy=False)) for name, t in model.named_parameters()]
    entries += _meta_tensors(model)
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    buf += struct.pack("<B", _MODE_BYTES[model.pooling_mode])
    buf += struct.pack("<I", len(entries))
    for name, arr in entries:
        raw_name = name.encode("utf-8")
        buf += struct.pack("<H", len(raw_name))
        buf += raw_name
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += np.ascontiguousarray(arr).tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(buf)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(
                f"checkpoint ends at byte {len(self.data)}, needed {self.pos + n}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> CAEModel:
    """Read, CRC-verify and shape-validate a checkpoint; lossless round trip."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 13:
        raise CheckpointTruncatedError(f"file of {len(blob)} bytes is too short to be a checkpoint")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}, not a checkpoint")
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointTruncatedError("CRC mismatch: checkpoint is truncated or corrupt")

    rd = _Reader(blob[:-4])
    rd.take(4)
    (version,) = rd.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"format version {version}, this build reads {CHECKPOINT_VERSION}")
    (mode_byte,) = rd.unpack("<B")
    if mode_byte not in _BYTE_MODES:
        raise CheckpointError(f"unknown pooling-mode byte {mode_byte}")
    mode = _BYTE_MODES[mode_byte]
    (count,) = rd.unpack("<I")

    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = rd.unpack("<H")
        name = rd.take(name_len).decode("utf-8")
        (rank,) = rd.unpack("<B")
        dims = rd.unpack(f"<{rank}Q") if rank else ()
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw = rd.take(4 * size)
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()

    model = init_model(seed=0, pooling_mode=mode, dtype=np.float32)
    expected = dict(model.named_parameters())
    stored_params = {k: v for k, v in tensors.items() if not k.startswith("meta.")}
    for name, t in expected.items():
        if name not in stored_params:
            raise CheckpointShapeError(f"missing tensor '{name}'")
        arr = stored_params.pop(name)
        if arr.shape != t.shape:
            raise CheckpointShapeError(
                f"tensor '{name}' has shape {arr.shape}, architecture expects {t.shape}")
        t.data[:] = arr
    if stored_params:
        raise CheckpointShapeError(f"unexpected tensor '{sorted(stored_params)[0]}'")

    meta = tensors.get("meta.train")
    if meta is not None and meta.size >= 2:
        model.epochs_completed = int(meta[0])
        model.final_loss = float(meta[1])
    if "meta.seed" in tensors:
        model.seed = _from_limbs(tensors["meta.seed"])
    if "meta.config_hash" in tensors:
        model.config_hash = _from_limbs(tensors["meta.config_hash"])
    return model
