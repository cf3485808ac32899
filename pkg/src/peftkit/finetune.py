"""Alpaca-format instruction data and the supervised fine-tuning loop.

Only adapter parameters are optimised during :func:`finetune`; the base
model's bytes are checksummed before and after to prove they never moved.
:func:`pretrain` trains every float parameter of a base model and exists so
desk-scale experiments have something worth forgetting.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import model_checksum
from .errors import ConfigError, DataError, NumericError, UsageError
from .model import BOS, EOS, PAD, TransformerModel, cross_entropy, encode
from .peft import BASE_MODES, DEFAULT_SITES, METHODS, PeftSet, attach
from .tensor import Tensor

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
CLIP_NORM = 1.0
REQUIRED_KEYS = ("instruction", "input", "output")


@dataclass(frozen=True)
class InstructionExample:
    instruction: str
    input: str
    output: str

    def __post_init__(self):
        if not self.instruction or not self.output:
            raise DataError("instruction and output must be non-empty")


def _parse_record(obj, where: str) -> InstructionExample:
    if not isinstance(obj, dict):
        raise DataError(f"{where}: expected an object, got {type(obj).__name__}")
    missing = [k for k in REQUIRED_KEYS if k not in obj]
    if missing:
        raise DataError(f"{where}: missing key(s) {', '.join(missing)}")
    bad = [k for k in REQUIRED_KEYS if not isinstance(obj[k], str)]
    if bad:
        raise DataError(f"{where}: non-string value for {', '.join(bad)}")
    try:
        return InstructionExample(obj["instruction"], obj["input"], obj["output"])
    except DataError as e:
        raise DataError(f"{where}: {e}") from None


def load_instruction_dataset(path) -> list[InstructionExample]:
    """Read a JSON array or JSON-lines file of instruction/input/output records."""
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        raise UsageError(f"{path}: dataset file is empty")
    if text.lstrip().startswith("["):
        try:
            records = json.loads(text)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: invalid JSON ({e})") from None
        return [_parse_record(r, f"{path}: record {i}") for i, r in enumerate(records)]
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: line {lineno}: invalid JSON ({e.msg})") from None
        out.append(_parse_record(obj, f"{path}: line {lineno}"))
    return out


def prompt_text(ex: InstructionExample) -> str:
    parts = [f"### Instruction:\n{ex.instruction}\n"]
    if ex.input:
        parts.append(f"### Input:\n{ex.input}\n")
    parts.append("### Response:\n")
    return "".join(parts)


@dataclass
class FormattedExample:
    tokens: list[int]
    mask: list[int]  # 1 where the token belongs to the response (incl. EOS)
    truncated: bool = False


def format_prompt(ex: InstructionExample, max_seq_len: int | None = None) -> FormattedExample:
    """BOS + Alpaca template + response + EOS, with a response-only loss mask.

    Over-long examples lose the tail of their response (EOS included).
    """
    prompt = [BOS] + encode(prompt_text(ex))
    response = encode(ex.output) + [EOS]
    truncated = False
    if max_seq_len is not None and len(prompt) + len(response) > max_seq_len:
        room = max_seq_len - len(prompt)
        if room < 1:
            raise DataError(f"prompt of {len(prompt)} tokens leaves no room for a response (max {max_seq_len})")
        response, truncated = response[:room], True
    return FormattedExample(prompt + response, [0] * len(prompt) + [1] * len(response), truncated)


def make_batch(items: Sequence[FormattedExample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-padded (inputs, targets, loss mask) for next-token prediction."""
    width = max(len(it.tokens) for it in items) - 1
    inputs = np.full((len(items), width), PAD, dtype=np.int64)
    targets = np.full((len(items), width), PAD, dtype=np.int64)
    mask = np.zeros((len(items), width), dtype=np.float64)
    for row, it in enumerate(items):
        n = len(it.tokens) - 1
        inputs[row, :n] = it.tokens[:-1]
        targets[row, :n] = it.tokens[1:]
        mask[row, :n] = it.mask[1:]
    return inputs, targets, mask


@dataclass
class TrainConfig:
    method: str = "lora"
    rank: int = 8
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 1
    max_seq_len: int = 64
    seed: int = 0
    base_mode: str = "float32"
    lora_scale: float = 1.0
    sites: tuple[str, ...] = DEFAULT_SITES
    clip_norm: float = CLIP_NORM

    def __post_init__(self):
        self.sites = tuple(self.sites)
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.base_mode not in BASE_MODES:
            raise ConfigError(f"unknown base mode {self.base_mode!r}")
        if self.base_mode == "quantized4" and self.method != "lora":
            raise ConfigError("base_mode=quantized4 requires method=lora")
        for name in ("rank", "batch_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0 or self.learning_rate <= 0 or self.clip_norm <= 0:
            raise ConfigError("epochs must be >= 0 and learning_rate/clip_norm > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sites"] = list(self.sites)
        return d


@dataclass
class FinetuneReport:
    epoch_losses: list[float] = field(default_factory=list)
    trainable_params: int = 0
    total_params: int = 0
    wall_seconds: float = 0.0
    base_checksum_before: str = ""
    base_checksum_after: str = ""
    truncated_examples: int = 0
    steps: int = 0
    aborted: bool = False
    abort_reason: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


class Adam:
    """Adam with bias correction; updates tensors in place."""

    def __init__(self, params: Sequence[Tensor], lr: float, betas=ADAM_BETAS, eps: float = ADAM_EPS):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * np.asarray(factor, dtype=p.grad.dtype)
    return total


def _train(
    params: Sequence[Tensor],
    loss_fn: Callable[[np.ndarray, np.ndarray, np.ndarray], Tensor],
    examples: Sequence[FormattedExample],
    lr: float,
    batch_size: int,
    epochs: int,
    seed: int,
    clip_norm: float,
    report: FinetuneReport,
    on_step: Callable[[int, float], None] | None = None,
) -> None:
    opt = Adam(params, lr)
    gen = T.rng(seed)
    for epoch in range(epochs):
        order = gen.permutation(len(examples))
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            batch = make_batch([examples[i] for i in order[start : start + batch_size]])
            if batch[2].sum() == 0:
                continue
            snapshot = [p.data.copy() for p in params]
            opt.zero_grad()
            try:
                loss = loss_fn(*batch)
                value = loss.item()
            except NumericError:
                value = math.nan
            if not math.isfinite(value):
                report.aborted, report.abort_reason = True, f"non-finite loss at epoch {epoch}, step {report.steps}"
                return
            T.backward(loss, wrt=params)
            clip_grad_norm(params, clip_norm)
            opt.step()
            if not all(np.isfinite(p.data).all() for p in params):
                for p, s in zip(params, snapshot):
                    p.data[...] = s
                report.aborted, report.abort_reason = True, f"non-finite parameters at step {report.steps}"
                return
            report.steps += 1
            total, count = total + value, count + 1
            if on_step is not None:
                on_step(report.steps, value)
        report.epoch_losses.append(total / max(count, 1))
        log.info("epoch %d mean loss %.4f", epoch, report.epoch_losses[-1])


def _format_all(dataset, max_seq_len: int, report: FinetuneReport) -> list[FormattedExample]:
    items = [format_prompt(ex, max_seq_len) for ex in dataset]
    report.truncated_examples = sum(it.truncated for it in items)
    return items


def finetune(
    model: TransformerModel,
    config: TrainConfig,
    dataset: Sequence[InstructionExample],
    on_step: Callable[[int, float], None] | None = None,
) -> tuple[PeftSet, FinetuneReport]:
    """Train a fresh PEFT set on ``dataset`` against a frozen ``model``.

    ``config.base_mode`` must describe ``model``: quantize the base first for
    a QLoRA run. If the loss goes non-finite the run stops and the report is
    marked aborted; the returned adapters hold the last finite state.
    """
    if not dataset:
        raise UsageError("finetune needs a non-empty dataset")
    if (config.base_mode == "quantized4") != model.is_quantized:
        raise ConfigError(f"base_mode={config.base_mode} but the model is {'quantized' if model.is_quantized else 'float'}")
    if config.max_seq_len > model.config.max_seq_len:
        raise ConfigError(f"max_seq_len {config.max_seq_len} exceeds model limit {model.config.max_seq_len}")
    peft = attach(model, config.method, config.rank, config.seed, config.sites, config.lora_scale)
    params = peft.parameters()
    report = FinetuneReport(trainable_params=peft.trainable_count(), total_params=model.parameter_count())
    report.base_checksum_before = model_checksum(model)
    items = _format_all(dataset, config.max_seq_len, report)
    started = time.perf_counter()

    def loss_fn(inputs, targets, mask):
        return cross_entropy(model.forward(inputs, peft), targets, mask)

    _train(params, loss_fn, items, config.learning_rate, config.batch_size, config.epochs,
           config.seed, config.clip_norm, report, on_step)
    report.wall_seconds = time.perf_counter() - started
    report.base_checksum_after = model_checksum(model)
    if report.base_checksum_after != report.base_checksum_before:
        raise NumericError("base weights changed during adapter-only fine-tuning")
    return peft, report


def pretrain(
    model: TransformerModel,
    dataset: Sequence[InstructionExample],
    learning_rate: float = 3e-3,
    batch_size: int = 32,
    epochs: int = 1,
    seed: int = 0,
    clip_norm: float = CLIP_NORM,
    on_step: Callable[[int, float], None] | None = None,
) -> FinetuneReport:
    """Full-parameter training of a float model, in place."""
    if model.is_quantized:
        raise ConfigError("pretraining needs a float model")
    if not dataset:
        raise UsageError("pretrain needs a non-empty dataset")
    params = list(model.float_parameters().values())
    for p in params:
        p.requires_grad = True
    report = FinetuneReport(trainable_params=model.parameter_count(), total_params=model.parameter_count())
    report.base_checksum_before = model_checksum(model)
    items = _format_all(dataset, model.config.max_seq_len, report)
    started = time.perf_counter()
    try:
        _train(params, lambda i, t, m: cross_entropy(model.forward(i), t, m), items, learning_rate,
               batch_size, epochs, seed, clip_norm, report, on_step)
    finally:
        for p in params:
            p.requires_grad = False
            p.grad = None
    report.wall_seconds = time.perf_counter() - started
    report.base_checksum_after = model_checksum(model)
    return report

