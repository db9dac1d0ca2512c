"""Corpus BLEU@1-4, ROUGE-L and CIDEr for single-reference captioning.

Variants: corpus-level BLEU with the standard brevity penalty and no
smoothing; ROUGE-L F-measure with beta = 1.2; plain CIDEr (no length
penalty, no count clipping) with IDF = log(N / df) from the references,
averaged over n = 1..4 and scaled by 10.
"""
from __future__ import annotations

import json
import math
import os
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

from .tensor import ContractError

ROUGE_BETA = 1.2
VARIANTS = {
    "bleu": "corpus-level, brevity penalty min(1, exp(1 - r/c)), no smoothing",
    "rougeL": f"mean sentence LCS F-measure, beta={ROUGE_BETA}",
    "cider": "plain CIDEr, tf-idf cosine over n=1..4, idf=log(N/df) on references, x10",
}

Tokens = Sequence[str]


def _tok(x) -> list[str]:
    return x.split() if isinstance(x, str) else list(x)


def _prepare(hypotheses, references) -> tuple[list[list[str]], list[list[str]]]:
    if len(hypotheses) != len(references):
        raise ContractError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ContractError("empty hypothesis set")
    return [_tok(h) for h in hypotheses], [_tok(r) for r in references]


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses, references, max_n: int = 4) -> list[float]:
    """[BLEU@1, ..., BLEU@max_n] over the whole corpus."""
    hyps, refs = _prepare(hypotheses, references)
    matched = [0] * max_n
    total = [0] * max_n
    for h, r in zip(hyps, refs):
        for n in range(1, max_n + 1):
            hc, rc = ngrams(h, n), ngrams(r, n)
            matched[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            total[n - 1] += sum(hc.values())
    c = sum(len(h) for h in hyps)
    r = sum(len(x) for x in refs)
    if c == 0:
        return [0.0] * max_n
    bp = 1.0 if c > r else math.exp(1 - r / c)
    scores = []
    log_sum = 0.0
    for k in range(max_n):
        if matched[k] == 0:
            scores.extend([0.0] * (max_n - k))
            break
        log_sum += math.log(matched[k] / total[k])
        scores.append(bp * math.exp(log_sum / (k + 1)))
    return scores


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_sentence(hyp: Tokens, ref: Tokens, beta: float = ROUGE_BETA) -> float:
    lcs = lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(hyp), lcs / len(ref)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def rouge_l(hypotheses, references, beta: float = ROUGE_BETA) -> float:
    hyps, refs = _prepare(hypotheses, references)
    return sum(rouge_l_sentence(h, r, beta) for h, r in zip(hyps, refs)) / len(hyps)


def _tfidf(counts: Counter, df: Counter, n_docs: int) -> dict:
    return {g: c * math.log(n_docs / max(1, df[g])) for g, c in counts.items()}


def _cosine(a: dict, b: dict) -> float:
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0 or nb == 0:
        return 0.0
    return sum(v * b.get(g, 0.0) for g, v in a.items()) / (na * nb)


def cider_per_sample(hypotheses, references, max_n: int = 4) -> list[float]:
    hyps, refs = _prepare(hypotheses, references)
    if len(refs) < 2:
        raise ContractError("CIDEr needs a corpus of at least 2 samples")
    N = len(refs)
    dfs = [Counter() for _ in range(max_n)]
    for r in refs:
        for n in range(1, max_n + 1):
            dfs[n - 1].update(ngrams(r, n).keys())
    out = []
    for h, r in zip(hyps, refs):
        sims = [_cosine(_tfidf(ngrams(h, n), dfs[n - 1], N), _tfidf(ngrams(r, n), dfs[n - 1], N))
                for n in range(1, max_n + 1)]
        out.append(10.0 * sum(sims) / max_n)
    return out


def cider(hypotheses, references, max_n: int = 4) -> float:
    scores = cider_per_sample(hypotheses, references, max_n)
    return sum(scores) / len(scores)


@dataclass
class MetricReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    cider: float
    rougeL: float
    per_sample: list[dict] = field(default_factory=list)
    variants: dict = field(default_factory=lambda: dict(VARIANTS))

    def scores(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("bleu1", "bleu2", "bleu3", "bleu4", "cider", "rougeL")}

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")

    def table(self) -> str:
        head = "  ".join(f"{k:>7}" for k in self.scores())
        row = "  ".join(f"{v:7.4f}" for v in self.scores().values())
        return f"{head}\n{row}"


def score_corpus(hypotheses, references, ids: Sequence[str] | None = None) -> MetricReport:
    hyps, refs = _prepare(hypotheses, references)
    b = bleu(hyps, refs)
    per_cider = cider_per_sample(hyps, refs)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(hyps))]
    rows = [
        {"id": sid, "hypothesis": " ".join(h), "reference": " ".join(r),
         "rougeL": rouge_l_sentence(h, r), "cider": c, "exact": h == r}
        for sid, h, r, c in zip(ids, hyps, refs, per_cider)
    ]
    return MetricReport(*b, cider=sum(per_cider) / len(per_cider),
                        rougeL=sum(x["rougeL"] for x in rows) / len(rows), per_sample=rows)
