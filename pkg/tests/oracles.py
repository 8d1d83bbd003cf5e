"""Independent reference implementations used by the tests."""

import math

import numpy as np


def stepped_download(times_s, mbps, size_bytes, start_s, dt=1e-3):
    """Transfer time by 1 ms time-stepped integration of the cyclic step-function link.

    Trace breakpoints and the start time must lie on the ``dt`` grid, so the
    rate is constant within each step and the final partial step is exact.
    """
    offsets = np.asarray(times_s, float) - times_s[0]
    rates = np.asarray(mbps, float)
    period = offsets[-1] + (offsets[-1] - offsets[-2]) if len(offsets) > 1 else 1.0
    n = int(round(period / dt))
    mids = (np.arange(n) + 0.5) * dt
    per_step = rates[np.searchsorted(offsets, mids, side="right") - 1]
    start = int(round(start_s / dt)) % n
    need = size_bytes * 8 / 1e6
    cycle = per_step.sum() * dt
    reps = int(math.ceil(need / cycle)) + 2
    seq = np.tile(np.roll(per_step, -start), reps)
    cum = np.cumsum(seq * dt)
    j = int(np.searchsorted(cum, need))
    before = cum[j - 1] if j else 0.0
    return j * dt + (need - before) / seq[j]


def threshold_sweep(pos_scores, neg_scores):
    """Exhaustive search for the threshold with zero false negatives and maximal TNR.

    Candidates are every observed score; among thresholds keeping all
    positives (score >= t continues), pick the highest TNR, then the largest t.
    """
    best = None
    for t in sorted(set(pos_scores) | set(neg_scores)):
        if any(p < t for p in pos_scores):
            continue
        tnr = sum(n < t for n in neg_scores) / len(neg_scores) if neg_scores else 1.0
        if best is None or (tnr, t) > best:
            best = (tnr, t)
    return best[1], best[0]


def loop_max(values):
    out = values[0]
    for v in values[1:]:
        if v > out:
            out = v
    return out
