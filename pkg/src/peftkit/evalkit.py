"""Capability-retention metrics and the base-vs-fine-tuned evaluation harness.

Three task kinds are supported:

* ``completion``: text continuation scored by normalized exact match (A_norm)
* ``numeric``: a number is pulled from free text and scored strictly (exact)
  and flexibly (within ``epsilon``)
* ``choice``: multiple choice, accuracy over selected option indices

:func:`evaluate_pair` runs one task for a base and a fine-tuned predictor and
assembles every derived quantity (ability gain, forgetting rate, knowledge
loss, intervals and a paired t-test) into a :class:`MetricReport`.
"""

from __future__ import annotations

import json
import math
import re
import string
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy import stats

from .errors import ConfigError, DataError, NumericError, UsageError

KINDS = ("completion", "numeric", "choice")
DEFAULT_EPSILON = 0.01
DEFAULT_Z = 1.96
INTERVALS = ("wald", "stderr")
# relative tolerance under which two choice scores count as tied
TIE_RTOL = 1e-9

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)
_UPPER_TABLE = str.maketrans(string.ascii_uppercase, string.ascii_lowercase)
_NUMBER_RE = re.compile(r"[-+]?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?|[-+]?\.\d+")


# -- records & config ------------------------------------------------------


@dataclass(frozen=True)
class EvalRecord:
    prediction: Any
    truth: Any
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown record kind {self.kind!r}")


@dataclass(frozen=True)
class EvalConfig:
    epsilon: float = DEFAULT_EPSILON
    z: float = DEFAULT_Z
    interval: str = "wald"

    def __post_init__(self):
        if not self.epsilon > 0 or not self.z > 0:
            raise ConfigError("epsilon and z must be positive")
        if self.interval not in INTERVALS:
            raise ConfigError(f"interval must be one of {INTERVALS}")


def _check(records: Sequence[EvalRecord], kind: str) -> None:
    if not records:
        raise UsageError("no records to score")
    for r in records:
        if r.kind != kind:
            raise UsageError(f"expected {kind} records, found {r.kind}")


# -- text / number helpers -------------------------------------------------


def normalize_text(s: str) -> str:
    """ASCII-lowercase, drop ASCII punctuation, collapse whitespace."""
    return " ".join(s.translate(_UPPER_TABLE).translate(_PUNCT_TABLE).split())


def extract_number(text: str) -> float | None:
    """Last decimal numeral in ``text`` (thousands commas allowed), else None."""
    matches = _NUMBER_RE.findall(text or "")
    if not matches:
        return None
    return float(matches[-1].replace(",", ""))


# -- indicator vectors -----------------------------------------------------


def completion_correct(records: Sequence[EvalRecord]) -> np.ndarray:
    return np.array([normalize_text(str(r.prediction)) == normalize_text(str(r.truth)) for r in records], dtype=int)


def numeric_correct(records: Sequence[EvalRecord], epsilon: float = DEFAULT_EPSILON) -> tuple[np.ndarray, np.ndarray]:
    strict, flex = [], []
    for r in records:
        p, t = r.prediction, float(r.truth)
        if p is None or (isinstance(p, float) and math.isnan(p)):
            strict.append(0)
            flex.append(0)
            continue
        strict.append(int(float(p) == t))
        flex.append(int(abs(float(p) - t) < epsilon))
    return np.array(strict, dtype=int), np.array(flex, dtype=int)


def choice_correct(records: Sequence[EvalRecord]) -> np.ndarray:
    return np.array([r.prediction is not None and int(r.prediction) == int(r.truth) for r in records], dtype=int)


def _percent(indicators: np.ndarray) -> float:
    return 100.0 * int(indicators.sum()) / len(indicators)


# -- metrics ---------------------------------------------------------------


def accuracy_norm(records: Sequence[EvalRecord]) -> float:
    _check(records, "completion")
    return _percent(completion_correct(records))


def delta_ability(a_ft_norm: float, a_base_norm: float) -> float:
    """Fine-tuned minus base normalized accuracy, in points.

    Rounded to 10 decimals so inputs printed to two decimals give the clean
    difference (61.20 - 60.77 -> 0.43, not 0.4299999...).
    """
    return round(a_ft_norm - a_base_norm, 10)


def numeric_accuracies(records: Sequence[EvalRecord], config: EvalConfig = EvalConfig()) -> tuple[float, float]:
    """(A_strict, A_flex) in percent; missing predictions are wrong under both."""
    _check(records, "numeric")
    strict, flex = numeric_correct(records, config.epsilon)
    return _percent(strict), _percent(flex)


def forgetting_rate(a_ft_flex: float, a_base_flex: float) -> float:
    """(1 - A_ft / A_base) x 100; negative when the fine-tuned model improves."""
    if a_base_flex <= 0:
        raise NumericError("forgetting rate is undefined when the base accuracy is 0")
    return (1.0 - a_ft_flex / a_base_flex) * 100.0


def choice_accuracy(records: Sequence[EvalRecord]) -> float:
    _check(records, "choice")
    return _percent(choice_correct(records))


def wald_ci(p_hat: float, n: int, z: float = DEFAULT_Z) -> float:
    """Half-width, in percent, of the normal-approximation interval."""
    if not 0.0 <= p_hat <= 1.0 or n < 1:
        raise UsageError("wald_ci needs 0 <= p_hat <= 1 and n >= 1")
    return z * math.sqrt(p_hat * (1.0 - p_hat) / n) * 100.0


def standard_error(p_hat: float, n: int) -> float:
    """Sample standard error of a 0/1 mean (n-1 divisor), in percent.

    This is the ``±`` convention of common LM evaluation harnesses.
    """
    if not 0.0 <= p_hat <= 1.0 or n < 2:
        raise UsageError("standard_error needs 0 <= p_hat <= 1 and n >= 2")
    return math.sqrt(p_hat * (1.0 - p_hat) / (n - 1)) * 100.0


def knowledge_loss(a_base: float, a_ft: float, ci_base: float, ci_ft: float) -> tuple[float, float]:
    """(A_base - A_ft, sqrt(ci_base^2 + ci_ft^2))."""
    if ci_base < 0 or ci_ft < 0:
        raise UsageError("interval half-widths must be nonnegative")
    return round(a_base - a_ft, 10), math.hypot(ci_base, ci_ft)


def paired_t_test(base_correct: Sequence[float], ft_correct: Sequence[float]) -> tuple[float, float]:
    """Two-sided paired t-test on per-item differences ``base - ft``.

    All-zero differences are reported as (0, 1); constant nonzero
    differences give an infinite statistic and p = 0.
    """
    b = np.asarray(base_correct, dtype=np.float64)
    f = np.asarray(ft_correct, dtype=np.float64)
    if b.shape != f.shape or b.ndim != 1:
        raise UsageError("paired samples must be 1-D and equally long")
    n = b.size
    if n < 2:
        raise UsageError("paired t-test needs at least two pairs")
    d = b - f
    if not d.any():
        return 0.0, 1.0
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    return float(t), float(2.0 * stats.t.sf(abs(t), n - 1))


# -- model scoring ---------------------------------------------------------


def pick_best(scores: Sequence[float]) -> int:
    """Index of the highest score; near-ties go to the lowest index."""
    s = np.asarray(scores, dtype=np.float64)
    best = s.max()
    tol = TIE_RTOL * max(1.0, abs(best))
    return int(np.flatnonzero(s >= best - tol)[0])


def choice_loglikelihoods(model, question: str, choices: Sequence[str], peft=None) -> list[float]:
    """Mean per-token log-probability of each choice continuing ``question``."""
    from . import tensor as T
    from .model import BOS, encode

    if len(choices) < 2:
        raise UsageError("multiple choice needs at least two choices")
    context = [BOS] + encode(question)
    scores = []
    with T.no_grad():
        for c in choices:
            cont = encode(c)
            if not cont:
                raise UsageError("empty choice text")
            tokens = context + cont
            logits = model.forward(tokens[:-1], peft).data.astype(np.float64)
            z = logits - logits.max(axis=-1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
            pos = np.arange(len(context) - 1, len(tokens) - 1)
            scores.append(float(logp[pos, cont].mean()))
    return scores


def score_multiple_choice(model, question: str, choices: Sequence[str], peft=None) -> int:
    return pick_best(choice_loglikelihoods(model, question, choices, peft))


# -- task files -------------------------------------------------------------


SCHEMAS = {
    "completion": {"context": str, "prediction": str, "truth": str},
    "numeric": {"question": str, "prediction_text": str, "truth": (int, float)},
    "choice": {"question": str, "choices": list, "truth_index": int, "prediction_index": int},
}
OPTIONAL = {"completion": {"prediction"}, "numeric": {"prediction_text"}, "choice": {"prediction_index"}}


def validate_row(row: dict, kind: str, where: str) -> dict:
    if kind not in KINDS:
        raise ConfigError(f"unknown task kind {kind!r}")
    if not isinstance(row, dict):
        raise DataError(f"{where}: expected a JSON object")
    schema = SCHEMAS[kind]
    unknown = [k for k in row if k not in schema]
    if unknown:
        raise DataError(f"{where}: key {unknown[0]!r} is not part of the {kind} schema")
    for key, typ in schema.items():
        if key not in row:
            if key in OPTIONAL[kind]:
                continue
            raise DataError(f"{where}: missing key {key!r} for kind {kind}")
        val = row[key]
        if isinstance(val, bool) or not isinstance(val, typ):
            raise DataError(f"{where}: key {key!r} has the wrong type for kind {kind}")
    if kind == "choice":
        ch = row["choices"]
        if len(ch) < 2 or not all(isinstance(c, str) and c for c in ch):
            raise DataError(f"{where}: key 'choices' needs at least two non-empty strings")
        for key in ("truth_index", "prediction_index"):
            if key in row and not 0 <= row[key] < len(ch):
                raise DataError(f"{where}: key {key!r} out of range")
    return row


def load_task_file(path, kind: str) -> list[dict]:
    """Parse a JSON-lines task file, validating every row against ``kind``."""
    rows = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: line {lineno}: invalid JSON ({e.msg})") from None
        rows.append(validate_row(obj, kind, f"{path}: line {lineno}"))
    if not rows:
        raise DataError(f"{path}: no records")
    return rows


def records_from_rows(rows: Sequence[dict], kind: str) -> list[EvalRecord]:
    """Records from predictions already present in the rows."""
    out = []
    for i, row in enumerate(rows):
        if kind == "completion":
            if "prediction" not in row:
                raise DataError(f"row {i}: no 'prediction' and no model to produce one")
            out.append(EvalRecord(row["prediction"], row["truth"], kind))
        elif kind == "numeric":
            if "prediction_text" not in row:
                raise DataError(f"row {i}: no 'prediction_text' and no model to produce one")
            out.append(EvalRecord(extract_number(row["prediction_text"]), row["truth"], kind))
        else:
            if "prediction_index" not in row:
                raise DataError(f"row {i}: no 'prediction_index' and no model to produce one")
            out.append(EvalRecord(row["prediction_index"], row["truth_index"], kind))
    return out


@dataclass
class ModelRunner:
    """Produces predictions for task rows by running a model (plus adapters)."""

    model: Any
    peft: Any = None
    max_new_tokens: int = 32

    def predict(self, rows: Sequence[dict], kind: str) -> list[EvalRecord]:
        from .model import BOS, decode, encode, generate

        if kind == "choice":
            return [
                EvalRecord(score_multiple_choice(self.model, r["question"], r["choices"], self.peft), r["truth_index"], kind)
                for r in rows
            ]
        key = "context" if kind == "completion" else "question"
        prompts = [[BOS] + encode(r[key]) for r in rows]
        outs = [decode(o) for o in generate(self.model, prompts, self.max_new_tokens, self.peft)]
        if kind == "completion":
            return [EvalRecord(o, r["truth"], kind) for o, r in zip(outs, rows)]
        return [EvalRecord(extract_number(o), r["truth"], kind) for o, r in zip(outs, rows)]


# -- report -----------------------------------------------------------------


PERCENT_FIELDS = (
    "a_norm_base", "a_norm_ft", "delta_a",
    "a_strict_base", "a_strict_ft", "a_flex_base", "a_flex_ft", "forgetting_rate",
    "a_base", "a_ft", "delta_k", "delta_k_half_width",
    "ci_base", "ci_ft", "stderr_base", "stderr_ft",
)


@dataclass
class MetricReport:
    kind: str
    n: int
    a_norm_base: float | None = None
    a_norm_ft: float | None = None
    delta_a: float | None = None
    a_strict_base: float | None = None
    a_strict_ft: float | None = None
    a_flex_base: float | None = None
    a_flex_ft: float | None = None
    forgetting_rate: float | None = None
    a_base: float | None = None
    a_ft: float | None = None
    delta_k: float | None = None
    delta_k_half_width: float | None = None
    ci_base: float | None = None
    ci_ft: float | None = None
    stderr_base: float | None = None
    stderr_ft: float | None = None
    t: float | None = None
    p: float | None = None
    interval: str = "wald"
    z: float = DEFAULT_Z
    epsilon: float = DEFAULT_EPSILON
    notes: list[str] = field(default_factory=list)

    def primary(self) -> tuple[float, float]:
        if self.kind == "completion":
            return self.a_norm_base, self.a_norm_ft
        if self.kind == "numeric":
            return self.a_flex_base, self.a_flex_ft
        return self.a_base, self.a_ft

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in PERCENT_FIELDS:
            if d[k] is not None:
                d[k] = round(d[k], 2)
        for k in ("t", "p"):
            if d[k] is not None and not math.isfinite(d[k]):
                d[k] = str(d[k])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> MetricReport:
        known = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in known}
        for k in ("t", "p"):
            if isinstance(d.get(k), str):
                d[k] = float(d[k])
        return cls(**d)


def build_report(
    base: Sequence[EvalRecord],
    ft: Sequence[EvalRecord],
    kind: str,
    config: EvalConfig = EvalConfig(),
    ci_override: tuple[float, float] | None = None,
) -> MetricReport:
    """Assemble a :class:`MetricReport` from paired prediction records."""
    _check(base, kind)
    _check(ft, kind)
    if len(base) != len(ft):
        raise UsageError(f"base has {len(base)} records but fine-tuned has {len(ft)}")
    if [r.truth for r in base] != [r.truth for r in ft]:
        raise UsageError("base and fine-tuned records disagree on ground truth")
    n = len(base)
    rep = MetricReport(kind=kind, n=n, interval=config.interval, z=config.z, epsilon=config.epsilon)
    if kind == "completion":
        ib, if_ = completion_correct(base), completion_correct(ft)
        rep.a_norm_base, rep.a_norm_ft = _percent(ib), _percent(if_)
        rep.delta_a = delta_ability(rep.a_norm_ft, rep.a_norm_base)
    elif kind == "numeric":
        sb, ib = numeric_correct(base, config.epsilon)
        sf, if_ = numeric_correct(ft, config.epsilon)
        rep.a_strict_base, rep.a_strict_ft = _percent(sb), _percent(sf)
        rep.a_flex_base, rep.a_flex_ft = _percent(ib), _percent(if_)
        if rep.a_flex_base > 0:
            rep.forgetting_rate = forgetting_rate(rep.a_flex_ft, rep.a_flex_base)
        else:
            rep.notes.append("forgetting rate undefined: base flexible accuracy is 0")
    else:
        ib, if_ = choice_correct(base), choice_correct(ft)
        rep.a_base, rep.a_ft = _percent(ib), _percent(if_)
    pb, pf = rep.primary()
    rep.ci_base, rep.ci_ft = wald_ci(pb / 100, n, config.z), wald_ci(pf / 100, n, config.z)
    if n >= 2:
        rep.stderr_base, rep.stderr_ft = standard_error(pb / 100, n), standard_error(pf / 100, n)
    if ci_override is not None:
        wb, wf = ci_override
        rep.notes.append("knowledge-loss width uses externally supplied intervals")
    elif config.interval == "stderr" and n >= 2:
        wb, wf = rep.stderr_base, rep.stderr_ft
    else:
        wb, wf = rep.ci_base, rep.ci_ft
    rep.delta_k, rep.delta_k_half_width = knowledge_loss(pb, pf, wb, wf)
    if n >= 2:
        rep.t, rep.p = paired_t_test(ib, if_)
    return rep


def _as_records(source, rows: Sequence[dict], kind: str) -> list[EvalRecord]:
    if source is None:
        return records_from_rows(rows, kind)
    if isinstance(source, ModelRunner):
        return source.predict(rows, kind)
    if hasattr(source, "forward"):
        return ModelRunner(source).predict(rows, kind)
    if isinstance(source, (str, Path)):
        pred_rows = load_task_file(source, kind)
    else:
        pred_rows = list(source)
    if len(pred_rows) != len(rows):
        raise DataError(f"prediction source has {len(pred_rows)} rows, task has {len(rows)}")
    return records_from_rows(pred_rows, kind)


def evaluate_pair(
    base,
    ft,
    task,
    kind: str,
    config: EvalConfig = EvalConfig(),
    ci_override: tuple[float, float] | None = None,
) -> MetricReport:
    """Score base and fine-tuned predictors on identical task rows.

    ``task`` is a task-file path or a list of row dicts. ``base``/``ft`` may
    each be a model (or :class:`ModelRunner`), a prediction file path, a list
    of rows carrying prediction fields, or None to use the task rows' own
    predictions.
    """
    rows = load_task_file(task, kind) if isinstance(task, (str, Path)) else [
        validate_row(r, kind, f"row {i}") for i, r in enumerate(task)
    ]
    return build_report(_as_records(base, rows, kind), _as_records(ft, rows, kind), kind, config, ci_override)


# -- rendering --------------------------------------------------------------


def _fmt(value, width=None) -> str:
    if value is None:
        return "-"
    s = f"{value:.2f}%"
    return f"{s} ± {width:.2f}%" if width is not None else s


def render_table(report: MetricReport, title: str | None = None) -> str:
    """Plain-text table with rows metric | base | fine-tuned | derived."""
    r = report
    wb, wf = (r.stderr_base, r.stderr_ft) if r.interval == "stderr" else (r.ci_base, r.ci_ft)
    rows: list[tuple[str, str, str, str]] = []
    if r.kind == "completion":
        rows.append(("Normalized Accuracy", _fmt(r.a_norm_base, wb), _fmt(r.a_norm_ft, wf), "-"))
        rows.append(("Ability Augmentation (dA)", "-", "-", f"{r.delta_a:+.2f}%"))
    elif r.kind == "numeric":
        rows.append(("Flexible Accuracy", _fmt(r.a_flex_base, wb), _fmt(r.a_flex_ft, wf), "-"))
        rows.append(("Strict Accuracy", _fmt(r.a_strict_base), _fmt(r.a_strict_ft), "-"))
        fr = "undefined" if r.forgetting_rate is None else f"{r.forgetting_rate:.2f}%"
        rows.append(("Forgetting Rate (FR)", "-", "-", fr))
    else:
        rows.append(("Accuracy", _fmt(r.a_base, wb), _fmt(r.a_ft, wf), "-"))
    rows.append(("Knowledge Loss (dK)", "-", "-", f"{r.delta_k:.2f}% ± {r.delta_k_half_width:.2f}%"))
    if r.t is not None:
        rows.append(("Paired t-test", "-", "-", f"t={r.t:.3f}, p={r.p:.4g}"))
    header = ("Metric", "Base", "Fine-tuned", "Derived")
    widths = [max(len(row[i]) for row in rows + [header]) for i in range(4)]
    line = lambda row: "  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()
    label = {"wald": f"Wald {r.z:g}z", "stderr": "std. error"}[r.interval]
    out = [title or f"Task kind: {r.kind} (n={r.n}, ± = {label})", line(header), line(tuple("-" * w for w in widths))]
    out += [line(row) for row in rows]
    out += [f"note: {n}" for n in r.notes]
    return "\n".join(out)
