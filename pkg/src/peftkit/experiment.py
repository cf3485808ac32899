"""Desk-scale base vs. fine-tuned comparison.

A small model is pretrained on both synthetic tasks (uppercasing, digit
addition) with only a handful of uppercasing examples, then adapted on
uppercasing alone. The addition task is never seen during adaptation, so any
drop in its accuracy is forgetting.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

from .evalkit import EvalConfig, MetricReport, ModelRunner, evaluate_pair
from .finetune import FinetuneReport, TrainConfig, finetune, pretrain, prompt_text
from .model import TransformerConfig, TransformerModel
from .peft import PeftSet
from .quantize import DEFAULT_BLOCK_SIZE
from .tasks import add_examples, upper_examples

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeskConfig:
    seed: int = 0
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    max_seq_len: int = 64
    pretrain_add_repeats: int = 8
    pretrain_upper: int = 60
    pretrain_epochs: int = 15
    pretrain_lr: float = 3e-3
    finetune_examples: int = 2000
    finetune_epochs: int = 5
    finetune_lr: float = 1e-2
    rank: int = 4
    batch_size: int = 32
    eval_upper: int = 200
    block_size: int = DEFAULT_BLOCK_SIZE

    def model_config(self) -> TransformerConfig:
        return TransformerConfig(d_model=self.d_model, n_heads=self.n_heads, n_layers=self.n_layers,
                                 d_ff=self.d_ff, max_seq_len=self.max_seq_len)


@dataclass
class DeskResult:
    base_mode: str
    upper: MetricReport
    add: MetricReport
    finetune: FinetuneReport
    peft: PeftSet
    base_codes_identical: bool | None = None

    def summary(self) -> dict:
        return {
            "base_mode": self.base_mode,
            "upper": self.upper.to_dict(),
            "add": self.add.to_dict(),
            "finetune": self.finetune.to_dict(),
            "base_codes_identical": self.base_codes_identical,
        }


def _seeds(seed: int) -> dict[str, int]:
    return {name: seed * 1000 + i for i, name in enumerate(("init", "pre_upper", "pretrain", "ft_data", "eval", "ft"))}


def pretrain_desk_base(cfg: DeskConfig = DeskConfig()) -> TransformerModel:
    s = _seeds(cfg.seed)
    model = TransformerModel.init(cfg.model_config(), s["init"])
    data = add_examples() * cfg.pretrain_add_repeats + upper_examples(cfg.pretrain_upper, s["pre_upper"])
    report = pretrain(model, data, cfg.pretrain_lr, cfg.batch_size, cfg.pretrain_epochs, s["pretrain"])
    log.info("pretrain losses %s", report.epoch_losses)
    return model


def task_rows(cfg: DeskConfig) -> tuple[list[dict], list[dict]]:
    s = _seeds(cfg.seed)
    upper = [{"context": prompt_text(e), "truth": e.output} for e in upper_examples(cfg.eval_upper, s["eval"])]
    add = [{"question": prompt_text(e), "truth": int(e.output)} for e in add_examples()]
    return upper, add


def run_forgetting_experiment(
    base: TransformerModel, cfg: DeskConfig = DeskConfig(), base_mode: str = "float32"
) -> DeskResult:
    """Adapt ``base`` on uppercasing only and score both tasks before/after.

    With ``base_mode="quantized4"`` the base is quantized first (QLoRA) and
    both sides of the comparison use the quantized weights.
    """
    s = _seeds(cfg.seed)
    model = base.quantized(cfg.block_size) if base_mode == "quantized4" else base
    codes_before = {k: p.codes for k, p in model.params.items() if hasattr(p, "codes")}
    train_cfg = TrainConfig(method="lora", rank=cfg.rank, learning_rate=cfg.finetune_lr, batch_size=cfg.batch_size,
                            epochs=cfg.finetune_epochs, max_seq_len=cfg.max_seq_len, seed=s["ft"], base_mode=base_mode)
    peft, report = finetune(model, train_cfg, upper_examples(cfg.finetune_examples, s["ft_data"]))
    codes_after = {k: p.codes for k, p in model.params.items() if hasattr(p, "codes")}
    upper_rows, add_rows = task_rows(cfg)
    before, after = ModelRunner(model, max_new_tokens=8), ModelRunner(model, peft, max_new_tokens=8)
    upper = evaluate_pair(before, after, upper_rows, "completion", EvalConfig())
    add = evaluate_pair(before, after, add_rows, "numeric", EvalConfig())
    identical = codes_before == codes_after if codes_before else None
    return DeskResult(base_mode, upper, add, report, peft, identical)


def config_dict(cfg: DeskConfig) -> dict:
    return asdict(cfg)
