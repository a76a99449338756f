"""Exact binomial sign test and multiple-comparison adjustment."""

from __future__ import annotations

import math


def _check_counts(successes: int, trials: int, null_p: float):
    if int(successes) != successes or int(trials) != trials:
        raise ValueError("successes and trials must be integers")
    if trials < 0 or not 0 <= successes <= trials:
        raise ValueError(f"need 0 <= successes <= trials, got {successes}/{trials}")
    if not 0.0 <= null_p <= 1.0:
        raise ValueError(f"null_p must lie in [0, 1], got {null_p}")
    return int(successes), int(trials)


def _log_pmf(k: int, n: int, log_p: float, log_q: float) -> float:
    log_choose = math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)
    return log_choose + k * log_p + (n - k) * log_q


def _log_tail(lo: int, hi: int, n: int, p: float) -> float:
    """log of sum_{k=lo..hi} C(n,k) p^k (1-p)^(n-k); -inf for an empty range."""
    if lo > hi:
        return -math.inf
    if p == 0.0:
        return 0.0 if lo == 0 else -math.inf
    if p == 1.0:
        return 0.0 if hi == n else -math.inf
    log_p, log_q = math.log(p), math.log1p(-p)
    terms = [_log_pmf(k, n, log_p, log_q) for k in range(lo, hi + 1)]
    top = max(terms)
    return top + math.log(math.fsum(math.exp(t - top) for t in terms))


def binomial_sign_test(successes: int, trials: int, null_p: float = 0.5) -> float:
    """One-tailed p-value ``P(K >= successes)`` for ``K ~ Binomial(trials, null_p)``."""
    s, n = _check_counts(successes, trials, null_p)
    return min(1.0, math.exp(_log_tail(s, n, n, null_p)))


def binomial_lower_tail(successes: int, trials: int, null_p: float = 0.5) -> float:
    """``P(K < successes)``, the complement of :func:`binomial_sign_test`."""
    s, n = _check_counts(successes, trials, null_p)
    return min(1.0, math.exp(_log_tail(0, s - 1, n, null_p)))


def bonferroni(alpha: float = 0.05, comparisons: int = 9) -> float:
    if comparisons < 1:
        raise ValueError("need at least one comparison")
    return alpha / comparisons
