"""Independent reference implementations shared by the test modules.

Each one is a plain-loop transcription kept deliberately naive so it can be
checked by eye.
"""

import math

import numpy as np

from capsed.metrics import Event

LABELS = ["a", "b", "c"]


def oracle_route(u_hat, r, beta=None):
    n_in, k_out, g = u_hat.shape
    b = [[0.0] * k_out for _ in range(n_in)] if beta is None else [list(map(float, row)) for row in beta]
    v = None
    for _ in range(r):
        alpha = []
        for i in range(n_in):
            m = max(b[i])
            e = [math.exp(x - m) for x in b[i]]
            z = sum(e)
            alpha.append([x / z for x in e])
        v = []
        for j in range(k_out):
            s = [sum(alpha[i][j] * u_hat[i, j, d] for i in range(n_in)) for d in range(g)]
            sq = sum(x * x for x in s)
            scale = sq / (1.0 + sq) / math.sqrt(sq) if sq > 0 else 0.0
            v.append([scale * x for x in s])
        for i in range(n_in):
            for j in range(k_out):
                b[i][j] += sum(u_hat[i, j, d] * v[j][d] for d in range(g))
    return np.array(v), np.array(b)


def naive_segment_counts(ref, hyp, frames_per_segment=50):
    S = I = D = N = 0
    n = ref.shape[0]
    for start in range(0, n, frames_per_segment):
        ref_active, hyp_active = set(), set()
        for t in range(start, min(start + frames_per_segment, n)):
            for k in range(ref.shape[1]):
                if ref[t, k]:
                    ref_active.add(k)
                if hyp[t, k]:
                    hyp_active.add(k)
        fn = len(ref_active - hyp_active)
        fp = len(hyp_active - ref_active)
        S += min(fn, fp)
        D += max(0, fn - fp)
        I += max(0, fp - fn)
        N += len(ref_active)
    return S, I, D, N


def naive_event_counts(ref, hyp, collar=0.5):
    """Direct transcription of the documented greedy onset-only rule."""
    hyp_idx = sorted(range(len(hyp)), key=lambda i: (hyp[i].onset, hyp[i].label))
    used = [False] * len(ref)
    unmatched_hyp = []
    correct = 0
    for i in hyp_idx:
        best, best_d = -1, math.inf
        for j in sorted(range(len(ref)), key=lambda j: (ref[j].onset, ref[j].label)):
            if used[j] or ref[j].label != hyp[i].label:
                continue
            d = abs(ref[j].onset - hyp[i].onset)
            if d <= collar + 1e-9 and d < best_d:
                best, best_d = j, d
        if best < 0:
            unmatched_hyp.append(i)
        else:
            used[best] = True
            correct += 1
    subs = 0
    for i in unmatched_hyp:
        best, best_d = -1, math.inf
        for j in sorted(range(len(ref)), key=lambda j: (ref[j].onset, ref[j].label)):
            if used[j] or ref[j].label == hyp[i].label:
                continue
            d = abs(ref[j].onset - hyp[i].onset)
            if d <= collar + 1e-9 and d < best_d:
                best, best_d = j, d
        if best >= 0:
            used[best] = True
            subs += 1
    return subs, len(hyp) - correct - subs, len(ref) - correct - subs, len(ref)


def random_events(rng, n, duration=6.0, labels=LABELS):
    out = []
    for _ in range(n):
        on = round(float(rng.uniform(0, duration - 0.1)), 3)
        off = round(min(duration, on + float(rng.uniform(0.02, 2.0))), 3)
        out.append(Event(on, off, labels[int(rng.integers(len(labels)))]))
    return out
