"""A small pre-LN GPT-style decoder built on the tape autodiff."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from tagc.hook import LayerSpec
from tagc.trainer.autodiff import (
    Tape,
    Tensor,
    causal_softmax,
    cross_entropy,
    embedding,
    gelu,
    layer_norm,
)


@dataclass(frozen=True)
class TinyModelConfig:
    layers: int = 2
    d_model: int = 64
    heads: int = 4
    ffn_mult: int = 4
    vocab: int = 256
    context: int = 64
    untied_head: bool = True

    def __post_init__(self):
        for name in ("layers", "d_model", "heads", "ffn_mult", "vocab", "context"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")

    def to_dict(self) -> dict:
        return asdict(self)


GPT2_SMALL = TinyModelConfig(layers=12, d_model=768, heads=12, ffn_mult=4, vocab=50257, context=1024)


def parameter_shapes(cfg: TinyModelConfig) -> list[tuple[str, str, tuple[int, ...]]]:
    """``(name, kind, shape)`` for every parameter tensor, in flat-vector order."""
    d, f = cfg.d_model, cfg.d_model * cfg.ffn_mult
    shapes = [
        ("wte", "embedding", (cfg.vocab, d)),
        ("wpe", "positional_embedding", (cfg.context, d)),
    ]
    for i in range(cfg.layers):
        p = f"h{i}."
        shapes += [
            (p + "ln1.g", "norm", (d,)),
            (p + "ln1.b", "norm", (d,)),
            (p + "attn.qkv.w", "attention_qkv", (d, 3 * d)),
            (p + "attn.qkv.b", "bias", (3 * d,)),
            (p + "attn.proj.w", "attention_out_proj", (d, d)),
            (p + "attn.proj.b", "bias", (d,)),
            (p + "ln2.g", "norm", (d,)),
            (p + "ln2.b", "norm", (d,)),
            (p + "mlp.fc.w", "feed_forward", (d, f)),
            (p + "mlp.fc.b", "bias", (f,)),
            (p + "mlp.proj.w", "feed_forward", (f, d)),
            (p + "mlp.proj.b", "bias", (d,)),
        ]
    shapes += [("lnf.g", "norm", (d,)), ("lnf.b", "norm", (d,))]
    if cfg.untied_head:
        shapes.append(("lm_head", "lm_head", (d, cfg.vocab)))
    return shapes


def layer_specs(cfg: TinyModelConfig) -> list[LayerSpec]:
    return [LayerSpec(name, kind, math.prod(shape)) for name, kind, shape in parameter_shapes(cfg)]


def parameter_count(cfg: TinyModelConfig) -> int:
    d, f, L = cfg.d_model, cfg.d_model * cfg.ffn_mult, cfg.layers
    per_layer = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * f + f) + (f * d + d)
    head = d * cfg.vocab if cfg.untied_head else 0
    return cfg.vocab * d + cfg.context * d + L * per_layer + 2 * d + head


class TinyGPT:
    """Parameters live in one flat float32 vector; ``params`` holds reshaped views."""

    def __init__(self, cfg: TinyModelConfig, flat: np.ndarray):
        self.cfg = cfg
        self.shapes = parameter_shapes(cfg)
        self.layers = layer_specs(cfg)
        total = sum(spec.parameter_count for spec in self.layers)
        if flat.shape != (total,):
            raise ValueError(f"expected {total} parameters, got {flat.shape}")
        self.flat = flat
        self.params: dict[str, np.ndarray] = {}
        offset = 0
        for name, _, shape in self.shapes:
            size = math.prod(shape)
            self.params[name] = flat[offset : offset + size].reshape(shape)
            offset += size

    def forward(self, ids: np.ndarray, p: dict[str, Tensor]) -> Tensor:
        cfg = self.cfg
        B, T = ids.shape
        if T > cfg.context:
            raise ValueError(f"sequence length {T} exceeds context {cfg.context}")
        H, dh = cfg.heads, cfg.d_model // cfg.heads
        pos = embedding(p["wpe"], np.arange(T))
        x = embedding(p["wte"], ids) + pos
        for i in range(cfg.layers):
            pre = f"h{i}."
            h = layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            qkv = h @ p[pre + "attn.qkv.w"] + p[pre + "attn.qkv.b"]
            q, k, v = qkv.split(3, axis=-1)
            q = q.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            k = k.reshape(B, T, H, dh).transpose(0, 2, 3, 1)
            v = v.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            att = causal_softmax((q @ k).scale(1.0 / math.sqrt(dh)))
            y = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
            x = x + (y @ p[pre + "attn.proj.w"] + p[pre + "attn.proj.b"])
            h = layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            h = gelu(h @ p[pre + "mlp.fc.w"] + p[pre + "mlp.fc.b"])
            x = x + (h @ p[pre + "mlp.proj.w"] + p[pre + "mlp.proj.b"])
        x = layer_norm(x, p["lnf.g"], p["lnf.b"])
        if cfg.untied_head:
            return x @ p["lm_head"]
        return x @ p["wte"].transpose(1, 0)

    def loss(self, ids: np.ndarray, targets: np.ndarray, flat: np.ndarray | None = None) -> float:
        """Forward pass only, optionally with another parameter vector of any float dtype."""
        params = self.params if flat is None else TinyGPT(self.cfg, flat).params
        p = {name: Tensor(arr) for name, arr in params.items()}
        return float(cross_entropy(self.forward(ids, p), targets).data)

    def loss_and_gradients(self, ids: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
        """Mean cross-entropy and its gradient as a flat vector aligned with ``flat``."""
        if ids.max(initial=0) >= self.cfg.vocab or targets.max(initial=0) >= self.cfg.vocab:
            raise ValueError("token id outside the vocabulary")
        p = {name: Tensor(arr) for name, arr in self.params.items()}
        with Tape() as tape:
            loss = cross_entropy(self.forward(ids, p), targets)
            tape.backward(loss)
        grad = np.zeros_like(self.flat)
        offset = 0
        for name, _, shape in self.shapes:
            size = math.prod(shape)
            g = p[name].grad
            if g is not None:
                grad[offset : offset + size] = g.reshape(-1)
            offset += size
        return float(loss.data), grad


def init_parameters(cfg: TinyModelConfig, seed: int, dtype=np.float32) -> np.ndarray:
    """GPT-2 style init: N(0, 0.02), residual projections scaled by 1/sqrt(2L), norms at 1/0."""
    rng = np.random.default_rng(seed)
    chunks = []
    resid_std = 0.02 / math.sqrt(2 * cfg.layers)
    for name, kind, shape in parameter_shapes(cfg):
        if kind == "norm":
            fill = 1.0 if name.endswith(".g") else 0.0
            chunks.append(np.full(shape, fill))
        elif kind == "bias":
            chunks.append(np.zeros(shape))
        else:
            std = resid_std if name.endswith("proj.w") else 0.02
            chunks.append(rng.normal(0.0, std, size=shape))
    return np.concatenate([c.reshape(-1) for c in chunks]).astype(dtype)


def build_model(cfg: TinyModelConfig, seed: int = 0) -> TinyGPT:
    return TinyGPT(cfg, init_parameters(cfg, seed))
