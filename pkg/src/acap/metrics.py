"""Multi-reference caption metrics: corpus BLEU-1..4, ROUGE-L and CIDEr-D.

A corpus is a sequence of ``(candidate, references)`` pairs where the
candidate is a token list and references a list of token lists.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence, Tuple

from .data import Vocab, decode, normalize_and_tokenize

Tokens = Sequence[str]
Corpus = Sequence[Tuple[Tokens, Sequence[Tokens]]]

ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0
CIDER_N = 4


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(cand_len: int, refs: Sequence[Tokens]) -> int:
    return min((abs(len(r) - cand_len), len(r)) for r in refs)[1]


def bleu(corpus: Corpus, n: int = 4) -> float:
    """Corpus BLEU-n: clipped n-gram precisions, geometric mean, brevity penalty. No smoothing."""
    if not 1 <= n <= 4:
        raise ValueError("n must be in 1..4")
    clipped = [0] * n
    totals = [0] * n
    cand_len = ref_len = 0
    for cand, refs in corpus:
        cand_len += len(cand)
        ref_len += _closest_ref_len(len(cand), refs)
        for k in range(1, n + 1):
            counts = ngrams(cand, k)
            max_ref: Counter = Counter()
            for r in refs:
                max_ref |= ngrams(r, k)
            clipped[k - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            totals[k - 1] += max(len(cand) - k + 1, 0)
    if cand_len == 0 or any(c == 0 for c in clipped):
        return 0.0
    log_p = sum(math.log(c / t) for c, t in zip(clipped, totals)) / n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_p)


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_item(cand: Tokens, refs: Sequence[Tokens], beta: float = ROUGE_BETA) -> float:
    """Best F-beta over the references, each from LCS precision and recall."""
    best = 0.0
    for r in refs:
        lcs = lcs_length(cand, r)
        if lcs == 0:
            continue
        p, rec = lcs / len(cand), lcs / len(r)
        best = max(best, (1 + beta**2) * p * rec / (rec + beta**2 * p))
    return best


def rouge_l(corpus: Corpus) -> float:
    if not corpus:
        return 0.0
    return sum(rouge_l_item(c, refs) for c, refs in corpus) / len(corpus)


def _all_ngrams(tokens: Tokens, n_max: int = CIDER_N) -> Counter:
    out: Counter = Counter()
    for k in range(1, n_max + 1):
        out.update(ngrams(tokens, k))
    return out


def cider_d_items(corpus: Corpus, sigma: float = CIDER_SIGMA) -> List[float]:
    """Per-item CIDEr-D with document frequencies from this corpus's references.

    A one-item corpus has log(N) = 0, so every IDF weight is zero and so is
    every score.
    """
    ref_counts = [[_all_ngrams(r) for r in refs] for _, refs in corpus]
    df: Counter = Counter()
    for counts in ref_counts:
        df.update(set().union(*[c.keys() for c in counts]))
    log_n = math.log(float(len(corpus))) if corpus else 0.0

    def vec(counts: Counter):
        v: List[Dict[tuple, float]] = [{} for _ in range(CIDER_N)]
        norm = [0.0] * CIDER_N
        for g, tf in counts.items():
            w = tf * (log_n - math.log(max(1.0, df[g])))
            v[len(g) - 1][g] = w
            norm[len(g) - 1] += w * w
        return v, [math.sqrt(x) for x in norm]

    scores = []
    for (cand, refs), counts in zip(corpus, ref_counts):
        vh, nh = vec(_all_ngrams(cand))
        total = 0.0
        for r, rc in zip(refs, counts):
            vr, nr = vec(rc)
            penalty = math.exp(-((len(cand) - len(r)) ** 2) / (2 * sigma**2))
            per_n = 0.0
            for k in range(CIDER_N):
                val = sum(min(w, vr[k].get(g, 0.0)) * vr[k].get(g, 0.0) for g, w in vh[k].items())
                if nh[k] != 0 and nr[k] != 0:
                    val /= nh[k] * nr[k]
                per_n += val * penalty
            total += per_n / CIDER_N
        scores.append(10.0 * total / len(refs))
    return scores


def cider_d(corpus: Corpus, sigma: float = CIDER_SIGMA) -> float:
    items = cider_d_items(corpus, sigma)
    return sum(items) / len(items) if items else 0.0


@dataclass
class MetricReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    cider_d: float
    n_items: int
    config: Dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def score_corpus(corpus: Corpus, config: Dict = None) -> MetricReport:
    return MetricReport(
        bleu1=bleu(corpus, 1),
        bleu2=bleu(corpus, 2),
        bleu3=bleu(corpus, 3),
        bleu4=bleu(corpus, 4),
        rouge_l=rouge_l(corpus),
        cider_d=cider_d(corpus),
        n_items=len(corpus),
        config=dict(config or {}),
    )


def evaluate(model, items, beam_cfg, vocab: Vocab, config: Dict = None) -> MetricReport:
    """Beam-decode every (spectrogram, reference captions) item and score the corpus."""
    from .decoding import beam_search

    corpus = []
    for spec, refs in items:
        words = decode(beam_search(model, spec, beam_cfg), vocab).split()
        corpus.append((words, [normalize_and_tokenize(r) for r in refs]))
    return score_corpus(corpus, config)
