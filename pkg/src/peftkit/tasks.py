"""Synthetic desk-scale tasks.

Task A ("upper"): uppercase a short lowercase word, scored with normalized
text accuracy. Task B ("add"): sum two single digits, scored as a numeric
task. Both are rendered as Alpaca-format instruction examples.
"""

from __future__ import annotations

import string

from .finetune import InstructionExample
from .tensor import rng

COPY_INSTRUCTION = "Copy."
UPPER_INSTRUCTION = "Uppercase."
ADD_INSTRUCTION = "Add."


def upper_examples(n: int, seed: int, length: int = 4) -> list[InstructionExample]:
    gen = rng(seed)
    letters = gen.integers(0, 26, size=(n, length))
    out = []
    for row in letters:
        word = "".join(string.ascii_lowercase[i] for i in row)
        out.append(InstructionExample(UPPER_INSTRUCTION, word, word.upper()))
    return out


def copy_examples(n: int, seed: int, length: int = 6) -> list[InstructionExample]:
    """Echo a random lowercase string; the simplest instruction to learn."""
    letters = rng(seed).integers(0, 26, size=(n, length))
    words = ["".join(string.ascii_lowercase[i] for i in row) for row in letters]
    return [InstructionExample(COPY_INSTRUCTION, w, w) for w in words]


def add_examples(n: int | None = None, seed: int = 0) -> list[InstructionExample]:
    """All 100 digit pairs when ``n`` is None, otherwise ``n`` random pairs."""
    if n is None:
        pairs = [(a, b) for a in range(10) for b in range(10)]
    else:
        pairs = [tuple(int(v) for v in p) for p in rng(seed).integers(0, 10, size=(n, 2))]
    return [InstructionExample(ADD_INSTRUCTION, f"{a}+{b}", str(a + b)) for a, b in pairs]


def to_alpaca_records(examples) -> list[dict]:
    return [{"instruction": e.instruction, "input": e.input, "output": e.output} for e in examples]
