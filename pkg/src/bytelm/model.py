"""Causal transformer decoder over raw utf-8 bytes.

The vocabulary is the 256 byte values; there is no tokenizer. Layers are
pre-norm: layer-norm feeds each sublayer and residuals carry the stream.

Every forward pass is computed over the model's full context window: shorter
inputs are right-padded and the pad rows dropped from the output. Because the
causal mask zeroes padded keys exactly, the logits for a shared prefix are
bit-identical regardless of input length or suffix bytes -- the evaluation
and probing code rely on this.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

VOCAB_SIZE = 256


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. Defaults are the full-scale configuration."""

    num_layers: int = 40
    hidden_size: int = 1024
    filter_size: int = 8192
    num_heads: int = 16
    embed_dim: int = 256
    context_len: int = 512
    vocab_size: int = VOCAB_SIZE
    dropout_rate: float = 0.3

    def validate(self) -> None:
        if self.vocab_size != VOCAB_SIZE:
            raise ValueError(f"vocab_size is fixed at {VOCAB_SIZE}, got {self.vocab_size}")
        if self.num_layers < 0:
            raise ValueError(f"num_layers must be >= 0, got {self.num_layers}")
        if min(self.hidden_size, self.filter_size, self.num_heads, self.embed_dim) < 1:
            raise ValueError("hidden_size, filter_size, num_heads, embed_dim must be >= 1")
        if self.hidden_size % self.num_heads != 0:
            raise ValueError(
                f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}"
            )
        if self.context_len < 1:
            raise ValueError(f"context_len must be >= 1, got {self.context_len}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


@dataclass(frozen=True)
class ActivationTrace:
    """Per-position feed-forward sublayer outputs (post-residual) at one layer."""

    layer_index: int  # 1-based
    vectors: np.ndarray  # [seq_len, hidden_size]


# Phi(-2) and Phi(2): sampling bounds for the truncated init distribution.
_PHI_LO = 0.5 * math.erfc(2.0 / math.sqrt(2.0))
_PHI_HI = 1.0 - _PHI_LO


def _trunc_normal(shape, std: float, generator: torch.Generator) -> torch.Tensor:
    """Normal truncated to +/-2 std via inverse CDF; deterministic per generator."""
    u = torch.rand(shape, generator=generator) * (_PHI_HI - _PHI_LO) + _PHI_LO
    return torch.erfinv(2.0 * u - 1.0) * (math.sqrt(2.0) * std)


def timestep_dropout(x: torch.Tensor, rate: float, generator: torch.Generator) -> torch.Tensor:
    """Inverted dropout that drops entire positions: one mask bit per timestep."""
    keep = torch.rand(x.shape[:-1] + (1,), generator=generator) >= rate
    return x * keep.to(x.dtype) / (1.0 - rate)


def feature_dropout(x: torch.Tensor, rate: float, generator: torch.Generator) -> torch.Tensor:
    """Inverted dropout that drops entire features across all timesteps."""
    keep = torch.rand(x.shape[:-2] + (1, x.shape[-1]), generator=generator) >= rate
    return x * keep.to(x.dtype) / (1.0 - rate)


class TransformerLayer(nn.Module):
    """Pre-norm block: masked multi-head attention, then a relu feed-forward.

    Dropout follows the dual scheme: the attention sublayer output is dropped
    per timestep, the relu activations per feature.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        h, f = config.hidden_size, config.filter_size
        self.num_heads = config.num_heads
        self.head_dim = h // config.num_heads
        self.dropout_rate = config.dropout_rate
        self.ln1_gain = nn.Parameter(torch.ones(h))
        self.ln1_bias = nn.Parameter(torch.zeros(h))
        self.attn_q = nn.Parameter(torch.zeros(h, h))
        self.attn_q_bias = nn.Parameter(torch.zeros(h))
        self.attn_k = nn.Parameter(torch.zeros(h, h))
        self.attn_k_bias = nn.Parameter(torch.zeros(h))
        self.attn_v = nn.Parameter(torch.zeros(h, h))
        self.attn_v_bias = nn.Parameter(torch.zeros(h))
        self.attn_out = nn.Parameter(torch.zeros(h, h))
        self.attn_out_bias = nn.Parameter(torch.zeros(h))
        self.ln2_gain = nn.Parameter(torch.ones(h))
        self.ln2_bias = nn.Parameter(torch.zeros(h))
        self.ffn_in = nn.Parameter(torch.zeros(h, f))
        self.ffn_in_bias = nn.Parameter(torch.zeros(f))
        self.ffn_out = nn.Parameter(torch.zeros(f, h))
        self.ffn_out_bias = nn.Parameter(torch.zeros(h))

    def forward(self, x, mask, dropout_generator=None):
        b, t, h = x.shape
        a = F.layer_norm(x, (h,), self.ln1_gain, self.ln1_bias)
        q = (a @ self.attn_q + self.attn_q_bias).view(b, t, self.num_heads, self.head_dim)
        k = (a @ self.attn_k + self.attn_k_bias).view(b, t, self.num_heads, self.head_dim)
        v = (a @ self.attn_v + self.attn_v_bias).view(b, t, self.num_heads, self.head_dim)
        scores = q.transpose(1, 2) @ k.transpose(1, 2).transpose(-2, -1)
        scores = scores / math.sqrt(self.head_dim)
        scores = scores.masked_fill(mask, float("-inf"))
        attn = torch.softmax(scores, dim=-1) @ v.transpose(1, 2)
        attn = attn.transpose(1, 2).reshape(b, t, h) @ self.attn_out + self.attn_out_bias
        if dropout_generator is not None:
            attn = timestep_dropout(attn, self.dropout_rate, dropout_generator)
        x = x + attn
        ff = F.layer_norm(x, (h,), self.ln2_gain, self.ln2_bias)
        ff = torch.relu(ff @ self.ffn_in + self.ffn_in_bias)
        if dropout_generator is not None:
            ff = feature_dropout(ff, self.dropout_rate, dropout_generator)
        ff = ff @ self.ffn_out + self.ffn_out_bias
        return x + ff


class ByteTransformer(nn.Module):
    """Decoder producing next-byte logits; logits at position i parameterize
    P(byte[i+1] | byte[0..i]) under the causal mask."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        e, h = config.embed_dim, config.hidden_size
        self.byte_embedding = nn.Parameter(torch.zeros(VOCAB_SIZE, e))
        self.embed_projection = nn.Parameter(torch.zeros(e, h))
        self.embed_projection_bias = nn.Parameter(torch.zeros(h))
        self.position_embedding = nn.Parameter(torch.zeros(config.context_len, h))
        self.layers = nn.ModuleList(TransformerLayer(config) for _ in range(config.num_layers))
        self.final_gain = nn.Parameter(torch.ones(h))
        self.final_bias = nn.Parameter(torch.zeros(h))
        self.output_head = nn.Parameter(torch.zeros(h, VOCAB_SIZE))
        self.output_head_bias = nn.Parameter(torch.zeros(VOCAB_SIZE))
        mask = torch.triu(torch.ones(config.context_len, config.context_len, dtype=torch.bool), 1)
        self.register_buffer("causal_mask", mask, persistent=False)
        self._reset_parameters(seed)

    def _reset_parameters(self, seed: int) -> None:
        # One generator, parameters filled in registration order: bit-identical
        # tensors for the same (config, seed).
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for name, p in self.named_parameters():
                if p.ndim == 2:
                    p.copy_(_trunc_normal(p.shape, 1.0 / math.sqrt(p.shape[0]), gen))
                elif name.endswith("gain"):
                    p.fill_(1.0)
                else:
                    p.fill_(0.0)

    def forward(
        self,
        input_bytes,
        mode: str = "eval",
        dropout_seed: int | None = None,
        collect_activations: bool = False,
    ):
        """Next-byte logits for a byte sequence ([T]) or a batch ([B, T]).

        Eval mode is deterministic; train mode applies the dual dropout scheme
        seeded by ``dropout_seed``. With ``collect_activations`` the return
        value is ``(logits, activations)`` where activations[i] is the
        post-residual feed-forward output stream of layer i+1.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = _as_index_tensor(input_bytes)
        single = x.ndim == 1
        if single:
            x = x.unsqueeze(0)
        t = int(x.shape[1])
        ctx = self.config.context_len
        if t < 1:
            raise ValueError("input is empty")
        if t > ctx:
            raise ValueError(f"input length {t} exceeds context_len {ctx}")

        gen = None
        if mode == "train" and self.config.dropout_rate > 0.0:
            if dropout_seed is None:
                raise ValueError("train mode with dropout requires dropout_seed")
            gen = torch.Generator().manual_seed(int(dropout_seed) % 2**63)

        if t < ctx:
            x = torch.cat([x, x.new_zeros(x.shape[0], ctx - t)], dim=1)

        h = self.byte_embedding[x] @ self.embed_projection + self.embed_projection_bias
        h = h + self.position_embedding
        activations = [] if collect_activations else None
        for layer in self.layers:
            h = layer(h, self.causal_mask, gen)
            if activations is not None:
                activations.append(h[:, :t])
        h = F.layer_norm(h, h.shape[-1:], self.final_gain, self.final_bias)
        logits = (h @ self.output_head + self.output_head_bias)[:, :t]

        if single:
            logits = logits.squeeze(0)
            if activations is not None:
                activations = [a.squeeze(0) for a in activations]
        if collect_activations:
            return logits, activations
        return logits

    def predict_distribution(self, context) -> np.ndarray:
        """Probabilities over the 256 next-byte values after ``context``."""
        x = _as_index_tensor(context)
        if x.ndim != 1:
            raise ValueError("predict_distribution takes a single sequence")
        with torch.no_grad():
            logits = self.forward(x, mode="eval")
        return torch.softmax(logits[-1].double(), dim=-1).numpy()

    def hidden_activation(self, input_bytes, layer_index: int) -> ActivationTrace:
        """Feed-forward sublayer output (post-residual) at a 1-based layer."""
        if not 1 <= layer_index <= self.config.num_layers:
            raise IndexError(
                f"layer_index {layer_index} outside [1, {self.config.num_layers}]"
            )
        with torch.no_grad():
            _, activations = self.forward(input_bytes, mode="eval", collect_activations=True)
        vectors = activations[layer_index - 1].detach().numpy().copy()
        return ActivationTrace(layer_index=layer_index, vectors=vectors)


def _as_index_tensor(input_bytes) -> torch.Tensor:
    if isinstance(input_bytes, torch.Tensor):
        return input_bytes.long()
    if isinstance(input_bytes, (bytes, bytearray, memoryview)):
        return torch.from_numpy(np.frombuffer(bytes(input_bytes), dtype=np.uint8).copy()).long()
    arr = np.asarray(input_bytes)
    if arr.ndim not in (1, 2):
        raise ValueError(f"byte input must be 1-D or 2-D, got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.int64))


def init_parameters(config: ModelConfig, seed: int) -> ByteTransformer:
    """Fresh model with all tensors drawn per the shape schedule; deterministic."""
    return ByteTransformer(config, seed=seed)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape schedule of every trainable tensor, in registration order."""
    config.validate()
    e, h, f = config.embed_dim, config.hidden_size, config.filter_size
    shapes: dict[str, tuple[int, ...]] = {
        "byte_embedding": (VOCAB_SIZE, e),
        "embed_projection": (e, h),
        "embed_projection_bias": (h,),
        "position_embedding": (config.context_len, h),
    }
    for i in range(config.num_layers):
        prefix = f"layers.{i}."
        shapes[prefix + "ln1_gain"] = (h,)
        shapes[prefix + "ln1_bias"] = (h,)
        shapes[prefix + "attn_q"] = (h, h)
        shapes[prefix + "attn_q_bias"] = (h,)
        shapes[prefix + "attn_k"] = (h, h)
        shapes[prefix + "attn_k_bias"] = (h,)
        shapes[prefix + "attn_v"] = (h, h)
        shapes[prefix + "attn_v_bias"] = (h,)
        shapes[prefix + "attn_out"] = (h, h)
        shapes[prefix + "attn_out_bias"] = (h,)
        shapes[prefix + "ln2_gain"] = (h,)
        shapes[prefix + "ln2_bias"] = (h,)
        shapes[prefix + "ffn_in"] = (h, f)
        shapes[prefix + "ffn_in_bias"] = (f,)
        shapes[prefix + "ffn_out"] = (f, h)
        shapes[prefix + "ffn_out_bias"] = (h,)
    shapes["final_gain"] = (h,)
    shapes["final_bias"] = (h,)
    shapes["output_head"] = (h, VOCAB_SIZE)
    shapes["output_head_bias"] = (VOCAB_SIZE,)
    return shapes


def count_parameters(config: ModelConfig) -> dict[str, int]:
    """Closed-form parameter counts per tensor group, plus the total."""
    config.validate()
    e, h, f, L = config.embed_dim, config.hidden_size, config.filter_size, config.num_layers
    counts = {
        "byte_embedding": VOCAB_SIZE * e,
        "embed_projection": e * h + h,
        "position_embedding": config.context_len * h,
        "attention": L * 4 * (h * h + h),
        "feed_forward": L * (h * f + f + f * h + h),
        "layer_norms": L * 4 * h,
        "final_norm": 2 * h,
        "output_head": h * VOCAB_SIZE + VOCAB_SIZE,
    }
    counts["total"] = sum(counts.values())
    return counts
