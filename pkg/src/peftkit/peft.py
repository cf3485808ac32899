"""Parameter-efficient tuning: LoRA, bottleneck adapters and prefix tuning.

Shapes follow the column-vector convention ``y = (W + A B) x`` with
``W: d_out x d_in``, ``A: d_out x r`` and ``B: r x d_in``. A LoRA adapter over
a 4-bit quantized base weight is QLoRA; the base still receives no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, NotMergeableError, RankError, ShapeError
from .model import ATTN_SITES, FFN_SITES, TransformerModel, attention, linear, prefix_attention
from .quantize import QuantizedMatrix
from .tensor import Tensor

METHODS = ("lora", "adapter", "prefix")
BASE_MODES = ("float32", "quantized4")
DEFAULT_RANK = 8
DEFAULT_SITES = ("q", "k", "v")
INIT_STD = 0.02


@dataclass
class LoraAdapter:
    site_id: str
    A: Tensor
    B: Tensor
    scale: float = 1.0

    def __post_init__(self):
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[1] != self.B.shape[0]:
            raise ShapeError(f"LoRA factors do not chain: A {self.A.shape}, B {self.B.shape}")
        d_out, r = self.A.shape
        if r < 1 or r > min(d_out, self.B.shape[1]):
            raise RankError(f"rank {r} outside [1, min({self.B.shape[1]}, {d_out})]")

    @property
    def r(self) -> int:
        return self.A.shape[1]

    @property
    def d_in(self) -> int:
        return self.B.shape[1]

    @property
    def d_out(self) -> int:
        return self.A.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {"A": self.A, "B": self.B}

    def delta(self) -> np.ndarray:
        return (self.scale * (self.A.data.astype(np.float32) @ self.B.data.astype(np.float32))).astype(np.float32)


@dataclass
class AdapterLayer:
    site_id: str
    W_down: Tensor  # r x d
    W_up: Tensor  # d x r

    def __post_init__(self):
        r, d = self.W_down.shape
        if self.W_up.shape != (d, r):
            raise ShapeError(f"W_up {self.W_up.shape} must be the transpose shape of W_down {self.W_down.shape}")
        if not 1 <= r < d:
            raise RankError(f"adapter bottleneck {r} must satisfy 1 <= r < d={d}")

    def parameters(self) -> dict[str, Tensor]:
        return {"W_down": self.W_down, "W_up": self.W_up}


@dataclass
class PrefixAdapter:
    site_id: str
    layer: int
    P_k: Tensor  # heads x p x d_k
    P_v: Tensor  # heads x p x d_v

    def __post_init__(self):
        if self.P_k.shape[:-1] != self.P_v.shape[:-1]:
            raise ShapeError(f"P_k {self.P_k.shape} and P_v {self.P_v.shape} disagree on heads/length")
        if self.p < 1:
            raise RankError("prefix length must be >= 1")

    @property
    def p(self) -> int:
        return self.P_k.shape[-2]

    def parameters(self) -> dict[str, Tensor]:
        return {"P_k": self.P_k, "P_v": self.P_v}


def lora_param_count(d_in: int, d_out: int, r: int) -> int:
    return d_in * r + r * d_out


def _child_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, index]).generate_state(1, np.uint64)[0])


def lora_init(d_in: int, d_out: int, r: int, seed: int, site_id: str = "", scale: float = 1.0) -> LoraAdapter:
    """A ~ N(0, 0.02^2), B = 0, so the update A B starts at exactly zero."""
    if r < 1 or r > min(d_in, d_out):
        raise RankError(f"rank {r} outside [1, min({d_in}, {d_out})]")
    gen = T.rng(seed)
    A = Tensor(gen.normal(0.0, INIT_STD, (d_out, r)).astype(np.float32), requires_grad=True)
    B = Tensor(np.zeros((r, d_in), dtype=np.float32), requires_grad=True)
    return LoraAdapter(site_id, A, B, scale)


def lora_linear(x: Tensor, w: Tensor | QuantizedMatrix, adapter: LoraAdapter) -> Tensor:
    """Row-activation LoRA: ``x W^T + scale * (x B^T) A^T``.

    The rank-r bottleneck is applied first, so no ``d_out x d_in`` product of
    the factors is ever formed.
    """
    if x.shape[-1] != adapter.d_in or tuple(w.shape) != (adapter.d_out, adapter.d_in):
        raise ShapeError(f"LoRA {adapter.A.shape}x{adapter.B.shape} does not fit weight {w.shape} / input {x.shape}")
    low = T.matmul(T.matmul(x, T.transpose(adapter.B)), T.transpose(adapter.A))
    if adapter.scale != 1.0:
        low = T.mul(low, adapter.scale)
    return linear(x, w) + low


def lora_forward(w: Tensor | QuantizedMatrix, adapter: LoraAdapter, x: Tensor) -> Tensor:
    """Column form ``(W + scale A B) x`` for ``x`` of shape ``d_in x n``."""
    if x.ndim != 2:
        raise ShapeError(f"lora_forward expects a d_in x n input, got {x.shape}")
    return T.transpose(lora_linear(T.transpose(x), w, adapter))


def lora_flops(d_in: int, d_out: int, r: int, n: int = 1) -> dict[str, int]:
    """Multiply-add count of :func:`lora_forward` for ``n`` input columns."""
    return {"base": d_in * d_out * n, "low_rank": r * (d_in + d_out) * n}


def adapter_init(d: int, r: int, seed: int, site_id: str = "") -> AdapterLayer:
    gen = T.rng(seed)
    W_down = Tensor(gen.normal(0.0, INIT_STD, (r, d)).astype(np.float32), requires_grad=True)
    W_up = Tensor(np.zeros((d, r), dtype=np.float32), requires_grad=True)
    return AdapterLayer(site_id, W_down, W_up)


def adapter_forward(x: Tensor, layer: AdapterLayer) -> Tensor:
    """``x + W_up GeLU(W_down x)`` applied to row activations."""
    if x.shape[-1] != layer.W_down.shape[1]:
        raise ShapeError(f"adapter width {layer.W_down.shape[1]} does not match input {x.shape}")
    h = T.gelu(T.matmul(x, T.transpose(layer.W_down)))
    return x + T.matmul(h, T.transpose(layer.W_up))


def prefix_init(layer: int, n_heads: int, p: int, d_k: int, seed: int) -> PrefixAdapter:
    gen = T.rng(seed)
    P_k = Tensor(gen.normal(0.0, INIT_STD, (n_heads, p, d_k)).astype(np.float32), requires_grad=True)
    P_v = Tensor(gen.normal(0.0, INIT_STD, (n_heads, p, d_k)).astype(np.float32), requires_grad=True)
    return PrefixAdapter(f"layers.{layer}.prefix", layer, P_k, P_v)


def prefix_attend(prefix: PrefixAdapter | None, Q: Tensor, K: Tensor, V: Tensor, causal: bool = False) -> Tensor:
    """Attention over ``[P_k; K]`` / ``[P_v; V]``; prefix keys are never masked."""
    if prefix is None:
        return attention(Q, K, V, causal=causal)
    return prefix_attention(prefix.P_k, prefix.P_v, Q, K, V, causal=causal)


@dataclass
class PeftSet:
    """Adapters of one method keyed by site id, plus the base storage mode.

    Passed to :func:`peftkit.model.forward`, which calls back into
    :meth:`linear`, :meth:`after` and :meth:`prefix` at each hook point.
    """

    method: str
    adapters: dict = field(default_factory=dict)
    base_mode: str = "float32"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown PEFT method {self.method!r}")
        if self.base_mode not in BASE_MODES:
            raise ConfigError(f"unknown base mode {self.base_mode!r}")
        if self.base_mode == "quantized4" and self.method != "lora":
            raise ConfigError("a quantized4 base is only supported with LoRA (QLoRA)")
        kind = {"lora": LoraAdapter, "adapter": AdapterLayer, "prefix": PrefixAdapter}[self.method]
        for site, ad in self.adapters.items():
            if not isinstance(ad, kind):
                raise ConfigError(f"site {site}: {type(ad).__name__} in a {self.method} set")
            if ad.site_id != site:
                raise ConfigError(f"adapter keyed {site!r} carries site id {ad.site_id!r}")
        self._prefix_by_layer = {ad.layer: ad for ad in self.adapters.values() if isinstance(ad, PrefixAdapter)}

    def add(self, adapter) -> None:
        if adapter.site_id in self.adapters:
            raise ConfigError(f"site {adapter.site_id} already has an adapter")
        self.adapters[adapter.site_id] = adapter
        self.__post_init__()

    # forward hooks
    def linear(self, site: str, x: Tensor, w) -> Tensor:
        ad = self.adapters.get(site) if self.method == "lora" else None
        return lora_linear(x, w, ad) if ad is not None else linear(x, w)

    def after(self, site: str, x: Tensor) -> Tensor:
        ad = self.adapters.get(site) if self.method == "adapter" else None
        return adapter_forward(x, ad) if ad is not None else x

    def prefix(self, layer: int) -> PrefixAdapter | None:
        return self._prefix_by_layer.get(layer)

    def named_parameters(self) -> dict[str, Tensor]:
        return {
            f"{site}.{name}": t
            for site, ad in sorted(self.adapters.items())
            for name, t in ad.parameters().items()
        }

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def trainable_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def check_against(self, model: TransformerModel) -> None:
        shapes = model.expected_shapes()
        c = model.config
        for site, ad in self.adapters.items():
            if isinstance(ad, LoraAdapter):
                if site not in shapes or tuple(shapes[site]) != (ad.d_out, ad.d_in):
                    raise ConfigError(f"LoRA site {site!r} does not match a base weight")
            elif isinstance(ad, AdapterLayer):
                layer = _layer_of(site)
                if layer is None or layer >= c.n_layers or not site.endswith(("after_attn", "after_ffn")):
                    raise ConfigError(f"adapter site {site!r} is not a layer hook")
                if ad.W_down.shape[1] != c.d_model:
                    raise ConfigError(f"adapter site {site!r} width mismatch")
            elif ad.layer >= c.n_layers or ad.P_k.shape[0] != c.n_heads or ad.P_k.shape[-1] != c.d_k:
                raise ConfigError(f"prefix {site!r} does not fit the model")
        if self.base_mode == "quantized4" and not model.is_quantized:
            raise ConfigError("PEFT set expects a quantized4 base but the model is float")


def _layer_of(site: str) -> int | None:
    parts = site.split(".")
    if len(parts) >= 2 and parts[0] == "layers" and parts[1].isdigit():
        return int(parts[1])
    return None


def lora_sites(model: TransformerModel, sites=DEFAULT_SITES) -> list[str]:
    unknown = set(sites) - set(ATTN_SITES + FFN_SITES)
    if unknown:
        raise ConfigError(f"unknown LoRA site names {sorted(unknown)}")
    return [s for s in model.linear_sites() if s.split(".")[-1] in sites]


def attach_lora(
    model: TransformerModel, r: int = DEFAULT_RANK, seed: int = 0, sites=DEFAULT_SITES, scale: float = 1.0
) -> PeftSet:
    peft = PeftSet("lora", base_mode="quantized4" if model.is_quantized else "float32")
    for i, site in enumerate(lora_sites(model, sites)):
        d_out, d_in = model.params[site].shape
        peft.adapters[site] = lora_init(d_in, d_out, r, _child_seed(seed, i), site, scale)
    peft.__post_init__()
    return peft


def attach_adapters(model: TransformerModel, r: int = DEFAULT_RANK, seed: int = 0) -> PeftSet:
    peft = PeftSet("adapter")
    i = 0
    for layer in range(model.config.n_layers):
        for hook in ("after_attn", "after_ffn"):
            site = f"layers.{layer}.{hook}"
            peft.adapters[site] = adapter_init(model.config.d_model, r, _child_seed(seed, i), site)
            i += 1
    peft.__post_init__()
    return peft


def attach_prefix(model: TransformerModel, p: int = DEFAULT_RANK, seed: int = 0) -> PeftSet:
    c = model.config
    peft = PeftSet("prefix")
    for layer in range(c.n_layers):
        ad = prefix_init(layer, c.n_heads, p, c.d_k, _child_seed(seed, layer))
        peft.adapters[ad.site_id] = ad
    peft.__post_init__()
    return peft


def attach(model: TransformerModel, method: str, r: int, seed: int, sites=DEFAULT_SITES, scale: float = 1.0) -> PeftSet:
    if method == "lora":
        return attach_lora(model, r, seed, sites, scale)
    if model.is_quantized:
        raise ConfigError("a quantized4 base is only supported with LoRA (QLoRA)")
    if method == "adapter":
        return attach_adapters(model, r, seed)
    if method == "prefix":
        return attach_prefix(model, r, seed)
    raise ConfigError(f"unknown PEFT method {method!r}")


def merge(model: TransformerModel, peft: PeftSet) -> TransformerModel:
    """Fold every LoRA update into its base weight: ``W <- W + scale A B``.

    Quantized bases are dequantized first, so the result is a float model
    with the base parameter count and no adapters attached.
    """
    if peft.method != "lora":
        raise NotMergeableError(f"{peft.method} parameters are structural and cannot fold into existing weights")
    peft.check_against(model)
    base = model.dequantized() if model.is_quantized else model.copy()
    for site, ad in peft.adapters.items():
        if site not in base.params:
            raise ConfigError(f"adapter site {site!r} has no base weight")
        w = base.params[site]
        if w.shape != (ad.d_out, ad.d_in):
            raise ShapeError(f"adapter {site}: {ad.d_out}x{ad.d_in} vs weight {w.shape}")
        base.params[site] = Tensor(w.data + ad.delta())
    return base
