"""Training: bits-per-byte objective, Adam with geometric learning-rate decay,
finite-difference gradient verification, and binary checkpoints.

All reported losses are bits per byte; cross-entropy is computed in nats
internally and divided by ln 2.
"""

from __future__ import annotations

import hashlib
import io
import math
import struct
import time
from dataclasses import asdict, dataclass, fields
from decimal import Decimal
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import RawCorpus, WindowBatch, sample_windows
from .model import VOCAB_SIZE, ByteTransformer, ModelConfig, parameter_shapes

LN2 = math.log(2.0)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters. Defaults follow the full-scale recipe."""

    initial_lr: float = 1e-4
    decay_factor: float = 0.99
    decay_every: int = 10_000
    total_steps: int = 2_000_000
    batch_size: int = 1024
    window_len: int = 512
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0

    def validate(self) -> None:
        if self.initial_lr <= 0:
            raise ValueError(f"initial_lr must be > 0, got {self.initial_lr}")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        if self.decay_every < 1:
            raise ValueError(f"decay_every must be >= 1, got {self.decay_every}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.window_len < 2:
            raise ValueError(f"window_len must be >= 2, got {self.window_len}")
        if not 0.0 <= self.adam_beta1 < 1.0 or not 0.0 <= self.adam_beta2 < 1.0:
            raise ValueError("adam betas must be in [0, 1)")


def desk_model_config() -> ModelConfig:
    """Small architecture that exercises every mechanism in minutes on a CPU."""
    return ModelConfig(
        num_layers=4,
        hidden_size=128,
        filter_size=512,
        num_heads=4,
        embed_dim=64,
        context_len=256,
        dropout_rate=0.0,
    )


def desk_train_config() -> TrainConfig:
    """Training settings matched to the desk-scale architecture."""
    return TrainConfig(
        initial_lr=1e-3,
        total_steps=1000,
        batch_size=8,
        window_len=256,
        seed=0,
    )


def bits_per_byte_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean -log2 P(target byte) over positions. Differentiable scalar."""
    if logits.ndim != 2 or logits.shape[-1] != VOCAB_SIZE:
        raise ValueError(f"logits must be [n, {VOCAB_SIZE}], got {tuple(logits.shape)}")
    if targets.ndim != 1 or targets.shape[0] != logits.shape[0]:
        raise ValueError(
            f"targets of shape {tuple(targets.shape)} do not align with "
            f"logits of shape {tuple(logits.shape)}"
        )
    if logits.shape[0] < 1:
        raise ValueError("need at least one scored position")
    return F.cross_entropy(logits, targets.long()) / LN2


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Geometric schedule: initial_lr * decay_factor^(step // decay_every).

    Evaluated in decimal arithmetic and rounded to float once, so the decayed
    rates equal their base-10 values exactly (1e-4 * 0.99 computed in binary
    floats is off by one ulp from 9.9e-5).
    """
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    k = step // cfg.decay_every
    return float(Decimal(repr(cfg.initial_lr)) * Decimal(repr(cfg.decay_factor)) ** k)


@dataclass
class OptimizerState:
    """Adam moment estimates congruent with the model's named parameters."""

    step: int
    first_moment: dict[str, torch.Tensor]
    second_moment: dict[str, torch.Tensor]


def init_optimizer(model: ByteTransformer) -> OptimizerState:
    return OptimizerState(
        step=0,
        first_moment={n: torch.zeros_like(p) for n, p in model.named_parameters()},
        second_moment={n: torch.zeros_like(p) for n, p in model.named_parameters()},
    )


def _derive_seed(base: int, step: int, salt: int = 0) -> int:
    """Stateless per-step seed stream; distinct salts give independent streams."""
    return (
        base * 0x9E3779B97F4A7C15 + (step + 1) * 0xBF58476D1CE4E5B9 + salt * 0x94D049BB133111EB
    ) % 2**63


def adam_update(
    model: ByteTransformer, opt: OptimizerState, cfg: TrainConfig, lr: float
) -> None:
    """One bias-corrected Adam update from the parameters' current gradients."""
    t = opt.step + 1
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon
    with torch.no_grad():
        for name, p in model.named_parameters():
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            if not torch.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient in {name} at step {opt.step}")
            m = opt.first_moment[name]
            v = opt.second_moment[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            m_hat = m / (1.0 - b1**t)
            v_hat = v / (1.0 - b2**t)
            p.addcdiv_(m_hat, v_hat.sqrt().add_(eps), value=-lr)
    opt.step = t


def train_step(
    model: ByteTransformer, opt: OptimizerState, batch, cfg: TrainConfig
) -> float:
    """One optimization step against the batch's bits-per-byte loss.

    Position 0 of each window is context only; positions 1..window_len-1 are
    scored. Returns the pre-update batch loss in bits per byte.
    """
    windows = batch.windows if isinstance(batch, WindowBatch) else np.asarray(batch)
    x = torch.from_numpy(np.ascontiguousarray(windows, dtype=np.int64))
    if x.ndim != 2 or x.shape[1] != cfg.window_len:
        raise ValueError(
            f"batch windows of shape {tuple(x.shape)} do not match window_len {cfg.window_len}"
        )

    logits = model.forward(
        x, mode="train", dropout_seed=_derive_seed(cfg.seed, opt.step, salt=2)
    )
    loss = bits_per_byte_loss(
        logits[:, :-1].reshape(-1, VOCAB_SIZE), x[:, 1:].reshape(-1)
    )
    bits = float(loss.detach())
    if not math.isfinite(bits):
        raise FloatingPointError(f"non-finite loss {bits} at step {opt.step}")
    model.zero_grad(set_to_none=True)
    loss.backward()
    adam_update(model, opt, cfg, learning_rate(opt.step, cfg))
    model.zero_grad(set_to_none=True)
    return bits


def gradient_check(
    config: ModelConfig,
    input_bytes,
    seed: int,
    num_coords: int = 200,
    step_size: float = 1e-4,
) -> float:
    """Max relative error between autograd and central finite differences.

    Runs entirely in float64 on a freshly seeded model; the same seed also
    picks the sampled parameter coordinates, so repeat calls are identical.
    """
    if num_coords < 1:
        raise ValueError(f"num_coords must be >= 1, got {num_coords}")
    model = ByteTransformer(config, seed=seed).double()
    x = torch.from_numpy(np.frombuffer(bytes(input_bytes), dtype=np.uint8).copy()).long()
    if x.numel() < 2:
        raise ValueError("input must hold at least 2 bytes (context plus one target)")

    def loss_value() -> torch.Tensor:
        logits = model.forward(x, mode="eval")
        return bits_per_byte_loss(logits[:-1], x[1:])

    loss = loss_value()
    model.zero_grad(set_to_none=True)
    loss.backward()
    names = [n for n, _ in model.named_parameters()]
    grads = {n: p.grad.detach().clone() for n, p in model.named_parameters()}
    sizes = np.array([model.get_parameter(n).numel() for n in names])
    bounds = np.cumsum(sizes)

    rng = np.random.default_rng(seed)
    picks = rng.integers(0, int(bounds[-1]), size=num_coords)
    worst = 0.0
    with torch.no_grad():
        for flat in picks:
            which = int(np.searchsorted(bounds, flat, side="right"))
            local = int(flat - (bounds[which - 1] if which else 0))
            p = model.get_parameter(names[which]).view(-1)
            orig = p[local].item()
            p[local] = orig + step_size
            f_plus = loss_value().item()
            p[local] = orig - step_size
            f_minus = loss_value().item()
            p[local] = orig
            numeric = (f_plus - f_minus) / (2.0 * step_size)
            analytic = grads[names[which]].view(-1)[local].item()
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst


def run_training(
    model: ByteTransformer,
    opt: OptimizerState,
    corpus: RawCorpus | bytes,
    cfg: TrainConfig,
    *,
    steps: int | None = None,
    log_every: int = 50,
    checkpoint_every: int = 0,
    checkpoint_path: str | Path | None = None,
    stop_below_bpb: float | None = None,
    log=print,
) -> list[tuple[int, float]]:
    """Single-writer training loop; returns the (step, bpb) history.

    Batches are a pure function of (cfg.seed, step), so interrupted runs can
    be reproduced from scratch. A checkpoint is written every
    ``checkpoint_every`` steps and at the end when a path is given.
    """
    cfg.validate()
    total = cfg.total_steps if steps is None else steps
    stream = corpus.joined_bytes() if isinstance(corpus, RawCorpus) else bytes(corpus)
    history: list[tuple[int, float]] = []
    start = time.perf_counter()

    def write_checkpoint() -> None:
        if checkpoint_path is not None:
            ckpt = Checkpoint.from_model(model, cfg, opt.step, optimizer=opt)
            save_checkpoint(ckpt, checkpoint_path)

    for s in range(total):
        batch = sample_windows(
            stream, cfg.window_len, cfg.batch_size, seed=_derive_seed(cfg.seed, s, salt=1)
        )
        loss = train_step(model, opt, batch, cfg)
        history.append((opt.step, loss))
        if log_every and (opt.step % log_every == 0 or s == total - 1):
            elapsed = time.perf_counter() - start
            log(
                f"step={opt.step} lr={learning_rate(s, cfg):.8g} "
                f"bpb={loss:.6f} elapsed_s={elapsed:.3f}"
            )
        if checkpoint_every and opt.step % checkpoint_every == 0:
            write_checkpoint()
        if stop_below_bpb is not None and loss < stop_below_bpb:
            break
    write_checkpoint()
    return history


# --------------------------------------------------------------------------
# Checkpoint format
#
#   magic "BLMCKPT1"
#   format_version            u32 LE
#   header length             u64 LE
#   header                    utf-8 "key=value" lines (configs, step, checksum
#                             algorithm, optimizer presence)
#   per tensor: name length   u64 LE
#               name          utf-8
#               rank          u64 LE
#               dims          u64 LE each
#               values        float32 LE, row-major
#   checksum                  u64 LE: low 8 bytes of sha256 over everything
#                             before it
# --------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"BLMCKPT1"
CHECKPOINT_VERSION = 1
_CHECKSUM_ALGORITHM = "sha256-64le"
_ADAM_M_PREFIX = "adam_m."
_ADAM_V_PREFIX = "adam_v."


class CheckpointError(Exception):
    """Base class for checkpoint (de)serialization failures."""


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


class CheckpointConsistencyError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    """A trained model snapshot: configs, step, parameters, optional optimizer."""

    model_config: ModelConfig
    train_config: TrainConfig
    step: int
    parameters: dict[str, torch.Tensor]
    optimizer: OptimizerState | None = None
    format_version: int = CHECKPOINT_VERSION

    @classmethod
    def from_model(
        cls,
        model: ByteTransformer,
        train_config: TrainConfig,
        step: int,
        optimizer: OptimizerState | None = None,
    ) -> "Checkpoint":
        params = {n: p.detach().to(torch.float32).clone() for n, p in model.named_parameters()}
        return cls(model.config, train_config, step, params, optimizer)

    def build_model(self) -> ByteTransformer:
        model = ByteTransformer(self.model_config, seed=0)
        with torch.no_grad():
            for name, p in model.named_parameters():
                p.copy_(self.parameters[name])
        return model

    def build_optimizer(self, model: ByteTransformer) -> OptimizerState:
        if self.optimizer is None:
            return init_optimizer(model)
        return self.optimizer


def _config_header_lines(ckpt: Checkpoint) -> list[str]:
    lines = [
        f"checksum={_CHECKSUM_ALGORITHM}",
        f"step={ckpt.step}",
        f"has_optimizer={int(ckpt.optimizer is not None)}",
    ]
    if ckpt.optimizer is not None:
        lines.append(f"optimizer_step={ckpt.optimizer.step}")
    for key, value in asdict(ckpt.model_config).items():
        lines.append(f"model.{key}={value!r}")
    for key, value in asdict(ckpt.train_config).items():
        lines.append(f"train.{key}={value!r}")
    return lines


def _write_tensor(buf: io.BytesIO, name: str, tensor: torch.Tensor) -> None:
    data = np.ascontiguousarray(
        tensor.detach().to(torch.float32).numpy(), dtype="<f4"
    )
    encoded = name.encode("utf-8")
    buf.write(struct.pack("<Q", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<Q", data.ndim))
    for dim in data.shape:
        buf.write(struct.pack("<Q", dim))
    buf.write(data.tobytes())


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", ckpt.format_version))
    header = ("\n".join(_config_header_lines(ckpt)) + "\n").encode("utf-8")
    buf.write(struct.pack("<Q", len(header)))
    buf.write(header)
    for name, tensor in ckpt.parameters.items():
        _write_tensor(buf, name, tensor)
    if ckpt.optimizer is not None:
        for name, tensor in ckpt.optimizer.first_moment.items():
            _write_tensor(buf, _ADAM_M_PREFIX + name, tensor)
        for name, tensor in ckpt.optimizer.second_moment.items():
            _write_tensor(buf, _ADAM_V_PREFIX + name, tensor)
    body = buf.getvalue()
    checksum = hashlib.sha256(body).digest()[:8]
    with open(path, "wb") as f:
        f.write(body)
        f.write(checksum)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(
                f"file ends {self.pos + n - len(self.data)} bytes early"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos


def _parse_header(text: str) -> dict[str, str]:
    values = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise CheckpointFormatError(f"malformed header line: {line!r}")
        key, value = line.split("=", 1)
        values[key] = value
    return values


def _config_from_header(values: dict[str, str], prefix: str, cls):
    kwargs = {}
    for field in fields(cls):
        key = prefix + field.name
        if key not in values:
            raise CheckpointFormatError(f"header is missing {key}")
        raw = values[key]
        try:
            kwargs[field.name] = int(raw) if field.type == "int" else float(raw)
        except ValueError as exc:
            raise CheckpointFormatError(f"bad header value {key}={raw!r}") from exc
    return cls(**kwargs)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    reader = _Reader(raw)
    magic = reader.take(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}: not a checkpoint file")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"unsupported format version {version}, expected {CHECKPOINT_VERSION}"
        )
    header_len = reader.u64()
    header = _parse_header(reader.take(header_len).decode("utf-8"))

    tensors: dict[str, torch.Tensor] = {}
    while reader.remaining > 8:
        name = reader.take(reader.u64()).decode("utf-8")
        rank = reader.u64()
        if rank > 8:
            raise CheckpointFormatError(f"implausible rank {rank} for tensor {name!r}")
        dims = tuple(reader.u64() for _ in range(rank))
        count = 1
        for dim in dims:
            count *= dim
        if 4 * count > reader.remaining:
            raise CheckpointTruncatedError(
                f"tensor {name!r} claims {count} values but only "
                f"{reader.remaining} bytes remain"
            )
        payload = reader.take(4 * count)
        array = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        tensors[name] = torch.from_numpy(array)
    if reader.remaining != 8:
        raise CheckpointTruncatedError("file ends inside the trailing checksum")
    stored = reader.take(8)
    actual = hashlib.sha256(raw[:-8]).digest()[:8]
    if stored != actual:
        raise CheckpointIntegrityError("checksum mismatch: checkpoint is corrupted")

    model_config = _config_from_header(header, "model.", ModelConfig)
    train_config = _config_from_header(header, "train.", TrainConfig)
    try:
        step = int(header["step"])
        has_optimizer = bool(int(header.get("has_optimizer", "0")))
        optimizer_step = int(header.get("optimizer_step", step))
    except (KeyError, ValueError) as exc:
        raise CheckpointFormatError(f"bad header field: {exc}") from exc

    try:
        expected = parameter_shapes(model_config)
    except ValueError as exc:
        raise CheckpointConsistencyError(f"stored model config is invalid: {exc}") from exc
    params: dict[str, torch.Tensor] = {}
    moments_m: dict[str, torch.Tensor] = {}
    moments_v: dict[str, torch.Tensor] = {}
    for name, tensor in tensors.items():
        if name.startswith(_ADAM_M_PREFIX):
            moments_m[name[len(_ADAM_M_PREFIX) :]] = tensor
        elif name.startswith(_ADAM_V_PREFIX):
            moments_v[name[len(_ADAM_V_PREFIX) :]] = tensor
        else:
            params[name] = tensor
    for name, shape in expected.items():
        if name not in params:
            raise CheckpointConsistencyError(f"missing tensor {name!r}")
        if tuple(params[name].shape) != shape:
            raise CheckpointConsistencyError(
                f"tensor {name!r} has shape {tuple(params[name].shape)}, "
                f"config implies {shape}"
            )
        if not torch.isfinite(params[name]).all():
            raise CheckpointConsistencyError(f"tensor {name!r} holds non-finite values")
    extra = set(params) - set(expected)
    if extra:
        raise CheckpointConsistencyError(f"unexpected tensors: {sorted(extra)}")

    optimizer = None
    if has_optimizer:
        for name, shape in expected.items():
            for moments, kind in ((moments_m, "first"), (moments_v, "second")):
                if name not in moments or tuple(moments[name].shape) != shape:
                    raise CheckpointConsistencyError(
                        f"optimizer {kind} moment for {name!r} missing or misshaped"
                    )
        optimizer = OptimizerState(
            step=optimizer_step,
            first_moment=moments_m,
            second_moment=moments_v,
        )

    return Checkpoint(
        model_config=model_config,
        train_config=train_config,
        step=step,
        parameters=params,
        optimizer=optimizer,
        format_version=version,
    )
