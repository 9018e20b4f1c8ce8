"""Explanation and answer metrics: corpus BLEU, ROUGE-L, CIDEr-D, accuracy.

All functions work on token sequences (tuples of strings).  Reports come in
two modes: UNFILTERED scores every pair that has a reference explanation;
FILTERED keeps only pairs whose answer was correct.  Answer accuracy is not
an explanation metric and is always computed over all pairs.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass

UNFILTERED = "UNFILTERED"
FILTERED = "FILTERED"

ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0


class MetricError(ValueError):
    pass


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# --- BLEU ---------------------------------------------------------------


def bleu(candidates, references, n: int = 4, *, smooth: bool = True) -> float:
    """Corpus-level BLEU-n: clipped n-gram precision with brevity penalty,
    geometric mean over orders 1..n.

    ``references`` holds one list of reference sequences per candidate.  With
    ``smooth``, an order with zero matches contributes a precision floor of
    1/(2 * total candidate n-gram count) instead of zeroing the score.
    """
    if not 1 <= n <= 4:
        raise MetricError("bleu order must be in 1..4")
    if len(candidates) == 0:
        raise MetricError("bleu needs at least one candidate")
    if len(candidates) != len(references):
        raise MetricError("candidates and references must align")
    correct = [0] * n
    guess = [0] * n
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        if len(refs) == 0:
            raise MetricError("every candidate needs at least one reference")
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for k in range(1, n + 1):
            cand_counts = _ngrams(cand, k)
            max_ref = Counter()
            for ref in refs:
                for gram, count in _ngrams(ref, k).items():
                    max_ref[gram] = max(max_ref[gram], count)
            correct[k - 1] += sum(min(c, max_ref[g]) for g, c in cand_counts.items())
            guess[k - 1] += max(0, len(cand) - k + 1)
    if cand_len == 0:
        return 0.0
    log_sum = 0.0
    for k in range(n):
        if guess[k] == 0:
            return 0.0  # no candidate long enough for this order
        if correct[k] > 0:
            precision = correct[k] / guess[k]
        elif smooth:
            precision = 1.0 / (2.0 * guess[k])
        else:
            return 0.0
        log_sum += math.log(precision)
    brevity = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return brevity * math.exp(log_sum / n)


# --- ROUGE-L ------------------------------------------------------------


def _lcs_length(a, b) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[len(b)]


def rouge_l(candidate, reference, beta: float = ROUGE_BETA) -> float:
    """LCS F-measure for one candidate/reference pair (0 for empty inputs)."""
    if len(candidate) == 0 or len(reference) == 0:
        return 0.0
    lcs = _lcs_length(candidate, reference)
    precision = lcs / len(candidate)
    recall = lcs / len(reference)
    if precision == 0.0 or recall == 0.0:
        return 0.0
    return ((1 + beta**2) * precision * recall) / (recall + beta**2 * precision)


def corpus_rouge_l(candidates, references, beta: float = ROUGE_BETA) -> float:
    """Mean over pairs; with several references the best precision and recall
    are combined, matching the captioning-toolkit convention."""
    if len(candidates) == 0:
        raise MetricError("rouge needs at least one pair")
    scores = []
    for cand, refs in zip(candidates, references):
        if len(refs) == 0:
            raise MetricError("every candidate needs at least one reference")
        if len(cand) == 0:
            scores.append(0.0)
            continue
        best_p, best_r = 0.0, 0.0
        for ref in refs:
            if len(ref) == 0:
                continue
            lcs = _lcs_length(cand, ref)
            best_p = max(best_p, lcs / len(cand))
            best_r = max(best_r, lcs / len(ref))
        if best_p == 0.0 or best_r == 0.0:
            scores.append(0.0)
        else:
            scores.append(((1 + beta**2) * best_p * best_r) / (best_r + beta**2 * best_p))
    return sum(scores) / len(scores)


# --- CIDEr-D ------------------------------------------------------------


def _tfidf_vector(counts: Counter, idf: dict, n: int):
    vecs = [defaultdict(float) for _ in range(n)]
    norms = [0.0] * n
    for gram, count in counts.items():
        order = len(gram) - 1
        weight = count * idf[gram]
        vecs[order][gram] = weight
        norms[order] += weight * weight
    return vecs, [math.sqrt(v) for v in norms]


def cider(candidates, references, n: int = 4, sigma: float = CIDER_SIGMA) -> float:
    """CIDEr-D: TF-IDF n-gram cosine per order 1..n with candidate counts
    clipped to reference counts, a Gaussian length penalty, mean over orders,
    scaled by 10.  IDF comes from the references of the evaluated corpus.
    """
    if len(candidates) != len(references):
        raise MetricError("candidates and references must align")
    if len(candidates) < 2:
        raise MetricError(
            "cider needs a corpus of >= 2 images for a well-defined IDF, "
            f"got {len(candidates)}"
        )
    doc_freq: Counter = Counter()
    for refs in references:
        if len(refs) == 0:
            raise MetricError("every candidate needs at least one reference")
        seen = set()
        for ref in refs:
            for k in range(1, n + 1):
                seen.update(_ngrams(ref, k).keys())
        doc_freq.update(seen)
    log_images = math.log(len(references))
    idf = defaultdict(lambda: log_images)
    for gram, df in doc_freq.items():
        idf[gram] = log_images - math.log(max(1.0, df))

    scores = []
    for cand, refs in zip(candidates, references):
        cand_counts = Counter()
        for k in range(1, n + 1):
            cand_counts.update(_ngrams(cand, k))
        cand_vecs, cand_norms = _tfidf_vector(cand_counts, idf, n)
        total = 0.0
        for ref in refs:
            ref_counts = Counter()
            for k in range(1, n + 1):
                ref_counts.update(_ngrams(ref, k))
            ref_vecs, ref_norms = _tfidf_vector(ref_counts, idf, n)
            penalty = math.exp(-((len(cand) - len(ref)) ** 2) / (2.0 * sigma**2))
            sim = 0.0
            for order in range(n):
                dot = sum(
                    min(weight, ref_vecs[order][gram]) * ref_vecs[order][gram]
                    for gram, weight in cand_vecs[order].items()
                    if gram in ref_vecs[order]
                )
                if cand_norms[order] > 0.0 and ref_norms[order] > 0.0:
                    sim += (dot / (cand_norms[order] * ref_norms[order])) * penalty
            total += sim / n
        scores.append(10.0 * total / len(refs))
    return sum(scores) / len(scores)


# --- evaluation pairs and reports ------------------------------------------


@dataclass(frozen=True)
class EvalPair:
    sample_id: int
    generated_rationale: tuple[str, ...]
    reference_rationales: tuple[tuple[str, ...], ...]  # empty for unlabelled samples
    generated_answer: tuple[str, ...]
    reference_answer: tuple[str, ...]

    @property
    def answer_correct(self) -> bool:
        return self.generated_answer == self.reference_answer

    @property
    def has_reference(self) -> bool:
        return len(self.reference_rationales) > 0


def accuracy(pairs) -> float:
    """Exact-match answer accuracy over all pairs."""
    if len(pairs) == 0:
        raise MetricError("accuracy needs at least one pair")
    return sum(1 for p in pairs if p.answer_correct) / len(pairs)


@dataclass(frozen=True)
class MetricReport:
    mode: str
    n_evaluated: int
    bleu1: float | None
    bleu2: float | None
    bleu3: float | None
    bleu4: float | None
    rouge_l: float | None
    cider: float | None
    accuracy: float

    def as_dict(self) -> dict:
        return {
            "mode": self.mode,
            "n_evaluated": self.n_evaluated,
            "bleu1": self.bleu1,
            "bleu2": self.bleu2,
            "bleu3": self.bleu3,
            "bleu4": self.bleu4,
            "rouge_l": self.rouge_l,
            "cider": self.cider,
            "accuracy": self.accuracy,
        }

    def table(self) -> str:
        def fmt(value):
            return "undefined" if value is None else f"{value:.4f}"

        rows = [
            ("mode", self.mode),
            ("pairs evaluated", str(self.n_evaluated)),
            ("BLEU-1", fmt(self.bleu1)),
            ("BLEU-2", fmt(self.bleu2)),
            ("BLEU-3", fmt(self.bleu3)),
            ("BLEU-4", fmt(self.bleu4)),
            ("ROUGE-L", fmt(self.rouge_l)),
            ("CIDEr-D", fmt(self.cider)),
            ("accuracy", fmt(self.accuracy)),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def build_report(pairs: list[EvalPair], mode: str) -> MetricReport:
    """Assemble one report.  FILTERED restricts explanation metrics to pairs
    with correct answers; accuracy always covers every pair."""
    if mode not in (UNFILTERED, FILTERED):
        raise MetricError(f"unknown report mode {mode!r}")
    if len(pairs) == 0:
        raise MetricError("cannot build a report from zero pairs")
    pool = [p for p in pairs if p.has_reference]
    if mode == FILTERED:
        pool = [p for p in pool if p.answer_correct]
    cands = [p.generated_rationale for p in pool]
    refs = [p.reference_rationales for p in pool]
    bleus: list[float | None] = [None] * 4
    rouge: float | None = None
    cider_score: float | None = None
    if pool:
        for k in range(1, 5):
            bleus[k - 1] = bleu(cands, refs, n=k)
        rouge = corpus_rouge_l(cands, refs)
        if len(pool) >= 2:
            cider_score = cider(cands, refs)
    return MetricReport(
        mode=mode,
        n_evaluated=len(pool),
        bleu1=bleus[0],
        bleu2=bleus[1],
        bleu3=bleus[2],
        bleu4=bleus[3],
        rouge_l=rouge,
        cider=cider_score,
        accuracy=accuracy(pairs),
    )
