"""Slow, loop-based reference implementations of the evaluation metrics."""


def rates_at(spoof, live, t):
    """Step-function error rates at threshold ``t`` by direct counting."""
    apcer = sum(1 for s in spoof if s < t) / len(spoof)
    bpcer = sum(1 for s in live if s >= t) / len(live)
    return apcer, bpcer


def acer_oracle(spoof, live, t):
    a, b = rates_at(spoof, live, t)
    return a, b, (a + b) / 2.0


def auc_oracle(spoof, live):
    """Every spoof/live pair: 1 if the spoof scores higher, 1/2 on a tie."""
    total = 0.0
    for s in spoof:
        for l in live:
            total += 1.0 if s > l else 0.5 if s == l else 0.0
    return total / (len(spoof) * len(live))


def sweep(spoof, live):
    """Candidate thresholds (observed values plus one above) with their rates."""
    cand = sorted(set(list(spoof) + list(live)))
    cand.append(cand[-1] + 1.0)
    return [(t,) + rates_at(spoof, live, t) for t in cand]


def eer_oracle(spoof, live):
    """Exhaustive sweep; flat crossings return the plateau midpoint,
    otherwise the rate curves are interpolated linearly."""
    rows = sweep(spoof, live)
    for j, (t, a, b) in enumerate(rows):
        if a - b >= 0:
            break
    t, a, b = rows[j]
    if a == b:
        k = j
        while k + 1 < len(rows) and rows[k + 1][1] == rows[k + 1][2]:
            k += 1
        lo = rows[j - 1][0] if j > 0 else t
        return a, (lo + rows[k][0]) / 2.0
    t0, a0, b0 = rows[j - 1]
    w = (b0 - a0) / ((a - b) - (a0 - b0))
    return a0 + w * (a - a0), t0 + w * (t - t0)


def interpolated_rates(spoof, live, t):
    """Rates linearly interpolated between neighbouring sweep candidates."""
    rows = sweep(spoof, live)
    for (t0, a0, b0), (t1, a1, b1) in zip(rows, rows[1:]):
        if t0 <= t <= t1:
            w = (t - t0) / (t1 - t0)
            return a0 + w * (a1 - a0), b0 + w * (b1 - b0)
    return rates_at(spoof, live, t)
