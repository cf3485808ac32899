"""Minimal decoder-only transformer over a byte-level vocabulary.

Each layer is post-norm: ``x = LayerNorm(x + Attention(x))`` followed by
``x = LayerNorm(x + FFN(x))``. Linear weights are stored output-major
(``d_out x d_in``) and applied to row activations as ``x @ W.T``; any of
them may be a :class:`~peftkit.quantize.QuantizedMatrix`.

Every linear weight doubles as an adapter attachment site whose id is its
parameter name, e.g. ``layers.0.attn.q``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, ShapeError, UsageError
from .quantize import DEFAULT_BLOCK_SIZE, QuantizedMatrix, dequantize, qlinear, quantize_4bit
from .tensor import Tensor

BOS, EOS, PAD = 256, 257, 258
VOCAB_SIZE = 259

ATTN_SITES = ("q", "k", "v", "o")
FFN_SITES = ("w1", "w2")
FFN_VARIANTS = ("paper", "standard")


def encode(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def decode(ids: Iterable[int]) -> str:
    return bytes(i for i in ids if 0 <= i < 256).decode("utf-8", errors="replace")


@dataclass(frozen=True)
class TransformerConfig:
    vocab_size: int = VOCAB_SIZE
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    max_seq_len: int = 64
    ffn_variant: str = "paper"

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "d_ff", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.ffn_variant not in FFN_VARIANTS:
            raise ConfigError(f"ffn_variant must be one of {FFN_VARIANTS}, got {self.ffn_variant!r}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TransformerConfig:
        return cls(**d)


def site_id(layer: int, name: str) -> str:
    return f"layers.{layer}.{'attn' if name in ATTN_SITES else 'ffn'}.{name}"


def parameter_shapes(c: TransformerConfig) -> dict[str, tuple[int, ...]]:
    d, f = c.d_model, c.d_ff
    shapes = {"tok_emb": (c.vocab_size, d), "pos_emb": (c.max_seq_len, d)}
    for i in range(c.n_layers):
        p = f"layers.{i}"
        for s in ATTN_SITES:
            shapes[f"{p}.attn.{s}"] = (d, d)
        shapes[f"{p}.ln1.gamma"] = (d,)
        shapes[f"{p}.ln1.beta"] = (d,)
        shapes[f"{p}.ffn.w1"] = (f, d)
        shapes[f"{p}.ffn.b1"] = (f,)
        shapes[f"{p}.ffn.w2"] = (d, f)
        shapes[f"{p}.ffn.b2"] = (d,)
        shapes[f"{p}.ln2.gamma"] = (d,)
        shapes[f"{p}.ln2.beta"] = (d,)
    shapes["lm_head"] = (c.vocab_size, d)
    return shapes


def linear(x: Tensor, w: Tensor | QuantizedMatrix) -> Tensor:
    if isinstance(w, QuantizedMatrix):
        return qlinear(x, w)
    return T.matmul(x, T.transpose(w))


def attention(Q: Tensor, K: Tensor, V: Tensor, causal: bool = False, n_prefix: int = 0) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes.

    With ``causal`` the i-th query (aligned to the end of the key sequence)
    may not see later keys; the first ``n_prefix`` keys are always visible.
    """
    if Q.shape[-1] != K.shape[-1]:
        raise ShapeError(f"query width {Q.shape[-1]} does not match key width {K.shape[-1]}")
    if K.shape[-2] != V.shape[-2]:
        raise ShapeError(f"{K.shape[-2]} keys but {V.shape[-2]} values")
    d_k = Q.shape[-1]
    scores = T.mul(T.matmul(Q, T.transpose(K)), 1.0 / math.sqrt(d_k))
    if causal:
        s_q, s_k = Q.shape[-2], K.shape[-2]
        real = s_k - n_prefix
        qi = np.arange(s_q)[:, None] + (real - s_q)
        kj = np.arange(s_k)[None, :] - n_prefix
        scores = T.masked_fill(scores, (kj > qi) & (kj >= 0), -np.inf)
    return T.matmul(T.softmax(scores, axis=-1), V)


def ffn(x: Tensor, w1, b1: Tensor, w2, b2: Tensor, variant: str = "paper", lin=linear) -> Tensor:
    """``paper``: GeLU(W2 GeLU(W1 x + b1)) + b2;  ``standard``: W2 GeLU(W1 x + b1) + b2."""
    h = T.gelu(lin(x, w1) + b1)
    h = lin(h, w2)
    if variant == "paper":
        h = T.gelu(h)
    elif variant != "standard":
        raise ConfigError(f"unknown ffn variant {variant!r}")
    return h + b2


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-probability of ``targets`` over unmasked positions."""
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.ones(targets.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    if targets.shape != logits.shape[:-1] or mask.shape != targets.shape:
        raise ShapeError(f"targets {targets.shape} / mask {mask.shape} do not match logits {logits.shape}")
    count = mask.sum()
    if count <= 0:
        raise UsageError("cross_entropy: every position is masked")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / count

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], -1) - 1.0, -1)
        grad *= (mask / count)[..., None] * float(g)
        return (grad.astype(logits.dtype),)

    return T.make_result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


class TransformerModel:
    """Config plus a flat name -> parameter store."""

    def __init__(self, config: TransformerConfig, params: dict[str, Tensor | QuantizedMatrix]):
        self.config = config
        self.params = dict(params)
        expected = self.expected_shapes()
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ShapeError(f"parameter set mismatch; missing={missing} unexpected={extra}")
        for name, shape in expected.items():
            if tuple(self.params[name].shape) != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {tuple(self.params[name].shape)}")

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        return parameter_shapes(self.config)

    @classmethod
    def init(cls, config: TransformerConfig, seed: int = 0) -> TransformerModel:
        gen = T.rng(seed)
        params: dict[str, Tensor] = {}
        for name, shape in parameter_shapes(config).items():
            if name.endswith("gamma"):
                arr = np.ones(shape)
            elif name.endswith(("beta", "b1", "b2")):
                arr = np.zeros(shape)
            elif name in ("tok_emb", "pos_emb"):
                arr = gen.normal(0.0, 1.0, shape)
            else:
                arr = gen.normal(0.0, 1.0 / math.sqrt(shape[1]), shape)
            params[name] = Tensor(arr.astype(np.float32))
        return cls(config, params)

    def linear_sites(self) -> list[str]:
        return [n for n in self.expected_shapes() if n.split(".")[-1] in ATTN_SITES + FFN_SITES]

    def matrix_names(self) -> list[str]:
        """2-D weights eligible for quantization (embeddings excluded)."""
        return self.linear_sites() + ["lm_head"]

    def parameter_count(self) -> int:
        return sum(int(np.prod(p.shape)) for p in self.params.values())

    @property
    def is_quantized(self) -> bool:
        return any(isinstance(p, QuantizedMatrix) for p in self.params.values())

    def float_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if isinstance(v, Tensor)}

    def quantized(self, block_size: int = DEFAULT_BLOCK_SIZE) -> TransformerModel:
        if self.is_quantized:
            raise UsageError("model is already quantized")
        params = dict(self.params)
        for name in self.matrix_names():
            params[name] = quantize_4bit(params[name], block_size)
        return TransformerModel(self.config, params)

    def dequantized(self) -> TransformerModel:
        params = {
            k: dequantize(v) if isinstance(v, QuantizedMatrix) else Tensor(v.data.copy())
            for k, v in self.params.items()
        }
        return TransformerModel(self.config, params)

    def copy(self) -> TransformerModel:
        return TransformerModel(
            self.config,
            {k: v if isinstance(v, QuantizedMatrix) else Tensor(v.data.copy()) for k, v in self.params.items()},
        )

    def forward(self, tokens, peft=None) -> Tensor:
        return forward(self, tokens, peft)

    __call__ = forward


def forward(model: TransformerModel, tokens, peft=None) -> Tensor:
    """Logits ``[seq, vocab]`` (or ``[batch, seq, vocab]`` for 2-D tokens).

    ``peft`` is any object exposing ``linear(site, x, w)``, ``after(site, x)``
    and ``prefix(layer)``; see :class:`peftkit.peft.PeftSet`.
    """
    c, p = model.config, model.params
    ids = np.asarray(tokens, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise UsageError(f"tokens must be a non-empty sequence or batch, got shape {ids.shape}")
    if ids.min() < 0 or ids.max() >= c.vocab_size:
        raise DataError(f"token id out of range [0, {c.vocab_size})")
    B, S = ids.shape
    if S > c.max_seq_len:
        raise DataError(f"sequence length {S} exceeds max_seq_len {c.max_seq_len}")
    H, dk = c.n_heads, c.d_k

    def lin(x, site):
        return peft.linear(site, x, p[site]) if peft is not None else linear(x, p[site])

    def heads(t):
        return T.transpose(T.reshape(t, (B, S, H, dk)), (0, 2, 1, 3))

    x = T.embedding(p["tok_emb"], ids) + T.embedding(p["pos_emb"], np.arange(S))
    for i in range(c.n_layers):
        pre = f"layers.{i}"
        q = heads(lin(x, f"{pre}.attn.q"))
        k = heads(lin(x, f"{pre}.attn.k"))
        v = heads(lin(x, f"{pre}.attn.v"))
        prefix = peft.prefix(i) if peft is not None else None
        if prefix is not None:
            a = prefix_attention(prefix.P_k, prefix.P_v, q, k, v, causal=True)
        else:
            a = attention(q, k, v, causal=True)
        a = T.reshape(T.transpose(a, (0, 2, 1, 3)), (B, S, c.d_model))
        a = lin(a, f"{pre}.attn.o")
        if peft is not None:
            a = peft.after(f"{pre}.after_attn", a)
        x = T.layer_norm(x + a, p[f"{pre}.ln1.gamma"], p[f"{pre}.ln1.beta"])
        f = ffn(
            x,
            f"{pre}.ffn.w1",
            p[f"{pre}.ffn.b1"],
            f"{pre}.ffn.w2",
            p[f"{pre}.ffn.b2"],
            c.ffn_variant,
            lin=lin,
        )
        if peft is not None:
            f = peft.after(f"{pre}.after_ffn", f)
        x = T.layer_norm(x + f, p[f"{pre}.ln2.gamma"], p[f"{pre}.ln2.beta"])
    logits = linear(x, p["lm_head"]) if peft is None else peft.linear("lm_head", x, p["lm_head"])
    return T.reshape(logits, (S, c.vocab_size)) if single else logits


def prefix_attention(P_k: Tensor, P_v: Tensor, Q: Tensor, K: Tensor, V: Tensor, causal: bool = True) -> Tensor:
    """Attention with learned vectors prepended to keys and values.

    ``P_k``/``P_v`` are ``[heads, p, d_k]`` (or ``[p, d_k]`` for a single
    head) and are broadcast across any extra leading axes of ``K``/``V``.
    """
    if P_k.shape[-1] != K.shape[-1] or P_v.shape[-1] != V.shape[-1]:
        raise ShapeError(f"prefix widths {P_k.shape}/{P_v.shape} do not match keys {K.shape} / values {V.shape}")
    p = P_k.shape[-2]
    if p == 0:
        return attention(Q, K, V, causal=causal)
    pk = T.broadcast_to(P_k, K.shape[:-2] + P_k.shape[-2:])
    pv = T.broadcast_to(P_v, V.shape[:-2] + P_v.shape[-2:])
    return attention(Q, T.concat([pk, K], axis=-2), T.concat([pv, V], axis=-2), causal=causal, n_prefix=p)


def generate(
    model: TransformerModel,
    prompts: Sequence[Sequence[int]],
    max_new_tokens: int,
    peft=None,
    stop: int = EOS,
) -> list[list[int]]:
    """Greedy decoding. Prompts of equal length are decoded as one batch."""
    out: list[list[int]] = [[] for _ in prompts]
    groups: dict[int, list[int]] = {}
    for idx, pr in enumerate(prompts):
        groups.setdefault(len(pr), []).append(idx)
    with T.no_grad():
        for length, idxs in groups.items():
            seqs = np.array([list(prompts[i]) for i in idxs], dtype=np.int64)
            done = np.zeros(len(idxs), dtype=bool)
            budget = min(max_new_tokens, model.config.max_seq_len - length)
            for _ in range(budget):
                logits = forward(model, seqs, peft).data[:, -1, :]
                nxt = logits.argmax(axis=-1)
                for j, tok in enumerate(nxt):
                    if not done[j]:
                        if tok == stop:
                            done[j] = True
                        else:
                            out[idxs[j]].append(int(tok))
                if done.all():
                    break
                seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
    return out
