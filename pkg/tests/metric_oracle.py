"""Reference metric implementations, written independently of retcap.metrics.

Exact rational arithmetic where possible, recursive LCS, explicit n-gram
dictionaries. Used to pin the checked-in metric suite.
"""
import math
from fractions import Fraction
from functools import lru_cache


def grams(words, n):
    out = {}
    for i in range(len(words) - n + 1):
        g = " ".join(words[i:i + n])
        out[g] = out.get(g, 0) + 1
    return out


def bleu(pairs, n_max=4):
    hyp_len = sum(len(h) for h, _ in pairs)
    ref_len = sum(len(r) for _, r in pairs)
    precisions = []
    for n in range(1, n_max + 1):
        hit = tot = 0
        for h, r in pairs:
            hg, rg = grams(h, n), grams(r, n)
            hit += sum(min(c, rg.get(g, 0)) for g, c in hg.items())
            tot += sum(hg.values())
        precisions.append(Fraction(hit, tot) if tot else Fraction(0))
    bp = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / hyp_len)
    scores = []
    for n in range(1, n_max + 1):
        ps = precisions[:n]
        if any(p == 0 for p in ps):
            scores.append(0.0)
        else:
            scores.append(bp * math.prod(float(p) for p in ps) ** (1 / n))
    return scores


def lcs(a, b):
    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))
    return go(0, 0)


def rouge_l(h, r, beta=1.2):
    m = lcs(tuple(h), tuple(r))
    if m == 0:
        return 0.0
    p, rec = m / len(h), m / len(r)
    return (1 + beta * beta) * p * rec / (rec + beta * beta * p)


def cider(pairs, n_max=4):
    N = len(pairs)
    per = []
    for h, r in pairs:
        total = 0.0
        for n in range(1, n_max + 1):
            def vec(words):
                v = {}
                for g, c in grams(words, n).items():
                    df = sum(1 for _, ref in pairs if g in grams(ref, n))
                    v[g] = c * math.log(N / max(df, 1))
                return v
            hv, rv = vec(h), vec(r)
            nh = math.sqrt(sum(x * x for x in hv.values()))
            nr = math.sqrt(sum(x * x for x in rv.values()))
            if nh > 0 and nr > 0:
                total += sum(x * rv.get(g, 0.0) for g, x in hv.items()) / (nh * nr)
        per.append(10 * total / n_max)
    return per
