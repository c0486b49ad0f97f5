"""Decoder-only transformer: Pre-RMSNorm, SwiGLU, GQA, RoPE, tied embeddings.

The full-scale reference shape is deep-and-thin (d_model 1536, 48 layers,
24 query / 8 KV heads, RoPE base 500000); desk-scale configs keep every
structural ratio and shrink width/depth. The output head is the embedding
matrix itself (structural tying): the forward pass transposes the same
tensor, so gradients from both uses accumulate on one parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as tz
from .errors import ConfigError, DimensionError
from .fp8 import Fp8LinearMeta, fp8_linear
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    d_ff: int = 160
    n_layers: int = 2
    n_q_heads: int = 4
    n_kv_heads: int = 2
    seq_len: int = 128
    max_positions: int = 4096
    rope_base: float = 500000.0
    vocab_size: int = 258
    rmsnorm_eps: float = 1e-5

    def __post_init__(self):
        if self.n_q_heads % self.n_kv_heads != 0:
            raise ConfigError("n_q_heads must be divisible by n_kv_heads")
        if self.d_model % self.n_q_heads != 0:
            raise ConfigError("d_model must be divisible by n_q_heads")
        if self.d_head % 2 != 0:
            raise ConfigError("d_head must be even for rotary pairs")
        if self.seq_len > self.max_positions:
            raise ConfigError("seq_len exceeds max_positions")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_q_heads

    @property
    def kv_dim(self) -> int:
        return self.n_kv_heads * self.d_head

    @property
    def group_size(self) -> int:
        return self.n_q_heads // self.n_kv_heads


def full_scale_config() -> ModelConfig:
    """The published reference shape (for arithmetic checks, not allocation)."""
    return ModelConfig(d_model=1536, d_ff=3840, n_layers=48, n_q_heads=24,
                       n_kv_heads=8, seq_len=3712, max_positions=131072,
                       rope_base=500000.0, vocab_size=258)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter's shape, derivable from the config alone.

    There is deliberately no output-head entry: the head is the embedding.
    """
    shapes: dict[str, tuple[int, ...]] = {"embed.weight": (cfg.vocab_size, cfg.d_model)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        shapes[f"{p}.attn.norm_gain"] = (cfg.d_model,)
        shapes[f"{p}.attn.wq"] = (cfg.d_model, cfg.d_model)
        shapes[f"{p}.attn.wk"] = (cfg.d_model, cfg.kv_dim)
        shapes[f"{p}.attn.wv"] = (cfg.d_model, cfg.kv_dim)
        shapes[f"{p}.attn.wo"] = (cfg.d_model, cfg.d_model)
        shapes[f"{p}.mlp.norm_gain"] = (cfg.d_model,)
        shapes[f"{p}.mlp.wgate"] = (cfg.d_model, cfg.d_ff)
        shapes[f"{p}.mlp.wup"] = (cfg.d_model, cfg.d_ff)
        shapes[f"{p}.mlp.wdown"] = (cfg.d_ff, cfg.d_model)
    shapes["final_norm.gain"] = (cfg.d_model,)
    return shapes


Params = dict[str, Tensor]


@dataclass(frozen=True)
class ModelScales:
    """Forward-pass multipliers owned by the parameterization."""
    attn_logit_scale: float
    logit_output_mult: float = 1.0


# -- rotary tables ---------------------------------------------------------

_rope_cache: dict[tuple[int, int, float], tuple[np.ndarray, np.ndarray]] = {}


def rope_tables(seq_len: int, d_head: int, base: float,
                positions: np.ndarray | None = None):
    """cos/sin tables [T, d_head//2]; cached per (seq_len, d_head, base)."""
    if positions is not None:
        pos = np.asarray(positions, dtype=np.float64)
        inv = base ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
        ang = np.outer(pos, inv)
        return np.cos(ang), np.sin(ang)
    key = (seq_len, d_head, base)
    if key not in _rope_cache:
        inv = base ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
        ang = np.outer(np.arange(seq_len, dtype=np.float64), inv)
        _rope_cache[key] = (np.cos(ang), np.sin(ang))
    return _rope_cache[key]


# -- ops -------------------------------------------------------------------

def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    return tz.rmsnorm(x, gain, eps)


def rope_apply(x: Tensor, positions: np.ndarray, base: float) -> Tensor:
    """Rotate [... , T, d_head] by per-position angles pos * base^(-2i/d_head)."""
    d_head = x.shape[-1]
    if d_head % 2 != 0:
        raise ConfigError("d_head must be even")
    cos, sin = rope_tables(len(positions), d_head, base, positions=positions)
    return tz.rope_rotate(x, cos, sin)


def gqa_attention(q: Tensor, k: Tensor, v: Tensor, n_q_heads: int,
                  n_kv_heads: int, logit_scale: float) -> Tensor:
    """Strictly causal grouped-query attention.

    q: [B, Hq, T, dh]; k, v: [B, Hkv, T, dh]. Each group of Hq/Hkv query
    heads shares one K/V head; logits are multiplied by logit_scale before
    the causal softmax.
    """
    if n_q_heads % n_kv_heads != 0:
        raise ConfigError("query heads must divide evenly into KV heads")
    group = n_q_heads // n_kv_heads
    k_full = tz.repeat_heads(k, group)
    v_full = tz.repeat_heads(v, group)
    scores = tz.scale(tz.matmul(q, tz.transpose(k_full, (0, 1, 3, 2))), logit_scale)
    probs = tz.causal_softmax(scores)
    return tz.matmul(probs, v_full)


def swiglu(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    """w_down applied to silu(x . w_gate) * (x . w_up), with x as rows."""
    return tz.matmul(tz.mul(tz.silu(tz.matmul(x, w_gate)), tz.matmul(x, w_up)),
                     w_down)


@dataclass
class Fp8Context:
    """Per-GEMM-site delayed-scaling state, persistent across steps."""
    sites: dict[str, Fp8LinearMeta] = field(default_factory=dict)
    history_len: int = 128

    def site(self, name: str) -> Fp8LinearMeta:
        if name not in self.sites:
            self.sites[name] = Fp8LinearMeta.fresh(self.history_len)
        return self.sites[name]

    def saturation_total(self) -> int:
        return sum(m.a.saturation_count + m.b.saturation_count
                   + m.grad.saturation_count for m in self.sites.values())


ProbeHook = Callable[[str, np.ndarray], None]


def forward(tokens: np.ndarray, params: Params, cfg: ModelConfig,
            scales: ModelScales, head_weight: Tensor | None = None,
            fp8: Fp8Context | None = None,
            probe: ProbeHook | None = None) -> Tensor:
    """Logits [B, T, vocab] for a [B, T] token block.

    ``head_weight`` overrides the tied output head (used by the untied
    oracle in tests); by default the embedding matrix is transposed in
    place in the graph, so its gradient accumulates both contributions.
    When ``fp8`` is given, every projection GEMM runs through the FP8
    emulation; everything else stays wide.
    """
    tokens = np.asarray(tokens)
    B, T = tokens.shape
    if tokens.min(initial=0) < 0 or tokens.max(initial=0) >= cfg.vocab_size:
        raise IndexError("token id out of vocab range")
    if T > cfg.max_positions:
        raise DimensionError(f"sequence length {T} exceeds max_positions")

    def proj(x: Tensor, w: Tensor, site: str) -> Tensor:
        if fp8 is not None:
            return fp8_linear(x, w, fp8.site(site))
        return tz.matmul(x, w)

    E = params["embed.weight"]
    x = tz.embedding(E, tokens)                      # [B, T, d]
    if probe:
        probe("embed", x.data)
    positions = np.arange(T)
    dh = cfg.d_head

    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        h = rmsnorm(x, params[f"{p}.attn.norm_gain"], cfg.rmsnorm_eps)
        q = proj(h, params[f"{p}.attn.wq"], f"{p}.attn.wq")
        k = proj(h, params[f"{p}.attn.wk"], f"{p}.attn.wk")
        v = proj(h, params[f"{p}.attn.wv"], f"{p}.attn.wv")
        q = tz.transpose(tz.reshape(q, (B, T, cfg.n_q_heads, dh)), (0, 2, 1, 3))
        k = tz.transpose(tz.reshape(k, (B, T, cfg.n_kv_heads, dh)), (0, 2, 1, 3))
        v = tz.transpose(tz.reshape(v, (B, T, cfg.n_kv_heads, dh)), (0, 2, 1, 3))
        q = rope_apply(q, positions, cfg.rope_base)
        k = rope_apply(k, positions, cfg.rope_base)
        ctx = gqa_attention(q, k, v, cfg.n_q_heads, cfg.n_kv_heads,
                            scales.attn_logit_scale)
        ctx = tz.reshape(tz.transpose(ctx, (0, 2, 1, 3)), (B, T, cfg.d_model))
        x = tz.add(x, proj(ctx, params[f"{p}.attn.wo"], f"{p}.attn.wo"))

        h = rmsnorm(x, params[f"{p}.mlp.norm_gain"], cfg.rmsnorm_eps)
        gate = proj(h, params[f"{p}.mlp.wgate"], f"{p}.mlp.wgate")
        up = proj(h, params[f"{p}.mlp.wup"], f"{p}.mlp.wup")
        down = proj(tz.mul(tz.silu(gate), up), params[f"{p}.mlp.wdown"],
                    f"{p}.mlp.wdown")
        x = tz.add(x, down)
        if probe:
            probe(f"resid_{i}", x.data)

    x = rmsnorm(x, params["final_norm.gain"], cfg.rmsnorm_eps)
    head = head_weight if head_weight is not None else E
    logits = proj(x, tz.transpose(head, (1, 0)), "head")
    logits = tz.scale(logits, scales.logit_output_mult)
    if probe:
        probe("logits", logits.data)
    return logits


def next_token_loss(block: np.ndarray, params: Params, cfg: ModelConfig,
                    scales: ModelScales, fp8: Fp8Context | None = None,
                    probe: ProbeHook | None = None) -> Tensor:
    """Mean NLL of block[:, 1:] predicted from block[:, :-1]."""
    inputs, targets = block[:, :-1], block[:, 1:]
    logits = forward(inputs, params, cfg, scales, fp8=fp8, probe=probe)
    B, T, V = logits.shape
    return tz.softmax_xent(tz.reshape(logits, (B * T, V)), targets.reshape(-1))
