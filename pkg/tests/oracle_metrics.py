"""Straight-line reference implementations of the evaluation metrics.

Written without numpy or the library's helpers so a shared bug cannot hide.
"""

import math
import string

from scipy import stats

PUNCT = set(string.punctuation)


def normalize(s):
    out = []
    for ch in s:
        if "A" <= ch <= "Z":
            ch = chr(ord(ch) + 32)
        if ch in PUNCT:
            continue
        out.append(ch)
    return " ".join("".join(out).split())


def accuracy_norm(preds, truths):
    hits = 0
    for p, t in zip(preds, truths):
        if normalize(p) == normalize(t):
            hits += 1
    return hits * 100.0 / len(preds)


def numeric(preds, truths, eps):
    strict = flex = 0
    for p, t in zip(preds, truths):
        if p is None:
            continue
        if p == t:
            strict += 1
        if abs(p - t) < eps:
            flex += 1
    n = len(preds)
    return strict * 100.0 / n, flex * 100.0 / n


def choice(preds, truths):
    return sum(1 for p, t in zip(preds, truths) if p == t) * 100.0 / len(preds)


def wald(acc_percent, n, z):
    p = acc_percent / 100.0
    return z * math.sqrt(p * (1 - p) / n) * 100.0


def ttest(base, ft):
    n = len(base)
    d = [b - f for b, f in zip(base, ft)]
    if all(x == 0 for x in d):
        return 0.0, 1.0
    mean = sum(d) / n
    var = sum((x - mean) ** 2 for x in d) / (n - 1)
    if var == 0:
        return math.copysign(math.inf, mean), 0.0
    t = mean / math.sqrt(var / n)
    ref = stats.ttest_rel(base, ft)
    return t, float(ref.pvalue)
