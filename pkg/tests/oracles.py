"""Independent brute-force recomputations used as test oracles."""

import math
import re
from itertools import combinations


def tokenize(text):
    return re.findall(r"[a-z0-9]+", text.lower())


def bm25_scores(docs, query, k1=1.2, b=0.75):
    """Whole-corpus BM25 from raw token counts; docs is {id: text}."""
    toks = {d: tokenize(t) for d, t in docs.items()}
    n = len(docs)
    avgdl = sum(len(v) for v in toks.values()) / n
    out = {}
    for d, words in toks.items():
        s = 0.0
        for term in sorted(set(tokenize(query))):  # fixed order so exact ties stay ties
            tf = words.count(term)
            if tf == 0:
                continue
            df = sum(1 for w in toks.values() if term in w)
            idf = math.log(1 + (n - df + 0.5) / (df + 0.5))
            s += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len(words) / avgdl))
        if any(t in words for t in set(tokenize(query))):
            out[d] = s
    return out


def bm25_ranking(docs, query, k):
    scores = bm25_scores(docs, query)
    return sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))[:k]


def postings(docs):
    out = {}
    for d in sorted(docs):
        words = tokenize(docs[d])
        for term in sorted(set(words)):
            out.setdefault(term, []).append((d, words.count(term)))
    return {t: tuple(v) for t, v in out.items()}


def entropy_normalized(probs):
    m = len(probs)
    if m <= 1:
        return 0.0
    return -sum(p * math.log(p) for p in probs if p > 0) / math.log(m)


def mean_pairwise_jaccard(texts):
    sets = [set(tokenize(t)) for t in texts]
    sims = []
    for a, b in combinations(sets, 2):
        sims.append(len(a & b) / len(a | b) if a | b else 1.0)
    return sum(sims) / len(sims)


def pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def frontier(points):
    """Points (calls, f1) not dominated by any other (fewer calls, higher F1)."""
    keep = []
    for c, f in points:
        if not any(c2 <= c and f2 >= f and (c2, f2) != (c, f) for c2, f2 in points):
            keep.append((c, f))
    return keep


VOCAB = ("river stone lamp orchard violin harbor ledger comet meadow quarry falcon tundra "
         "saddle prism beacon canyon ember glacier lantern marble nectar oasis pepper quill "
         "raven summit thistle umber velvet willow yarrow zephyr anchor bramble cobalt dune").split()


def random_docs(rng, n=50, lo=5, hi=40):
    """n passages of random vocabulary words, some with repeated terms."""
    return {f"p{i:03d}": " ".join(rng.choice(VOCAB) for _ in range(rng.randint(lo, hi))) for i in range(n)}
