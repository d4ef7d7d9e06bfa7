"""Reference computations written independently of the package, used as test oracles."""

import math
from functools import lru_cache
from itertools import combinations


def brute_force_min_cost(accesses, capacity):
    """Exhaustive minimum regeneration cost.

    ``accesses`` is a list of (session, tokens_required, tokens_saved_on_hit).
    After every access any subset of resident entries (the one just touched
    included) may be dropped; the entries kept plus the entry being served
    must always fit in ``capacity``.
    """
    acc = tuple(accesses)

    @lru_cache(maxsize=None)
    def go(k, kept):
        if k == len(acc):
            return 0
        s, need, saved = acc[k]
        held = dict(kept)
        cost = need - (saved if s in held else 0)
        others = sorted((x, sz) for x, sz in held.items() if x != s)
        best = math.inf
        for r in range(len(others) + 1):
            for keep in combinations(others, r):
                if sum(sz for _, sz in keep) + need > capacity:
                    continue
                best = min(best, go(k + 1, frozenset(keep)), go(k + 1, frozenset(keep + ((s, need),))))
        return cost + best

    return go(0, frozenset())


def welch_by_hand(a, b):
    """Textbook Welch statistic and Welch-Satterthwaite degrees of freedom."""
    na, nb = len(a), len(b)
    ma, mb = sum(a) / na, sum(b) / nb
    va = sum((x - ma) ** 2 for x in a) / (na - 1)
    vb = sum((x - mb) ** 2 for x in b) / (nb - 1)
    se2 = va / na + vb / nb
    t = (ma - mb) / math.sqrt(se2)
    df = se2 ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    return t, df


def chain_regeneration(k, c, retain):
    """Regeneration tokens over a k-step chain that adds c tokens of cache per step."""
    if retain:
        return c
    return sum(i * c for i in range(1, k + 1))
