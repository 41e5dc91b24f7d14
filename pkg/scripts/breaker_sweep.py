#!/usr/bin/env python3
"""Trip latency of the tier breaker across thresholds and windows.

Attack bursts are mixed with background noise (unwatched events plus sparse
watched false alarms). For each policy we report how many bursts tripped the
breaker, the mean delay from burst start to trip, and how often noise alone
tripped it.
"""
import argparse
import logging
import random
import statistics

from sentinel.breaker import DetectionPolicy, TierBreaker
from sentinel.domain import ThreatEvent, ThreatKind


def trial(policy, rng, burst_rate_ms, noise_gap_ms, horizon_ms=60_000):
    breaker = TierBreaker(policy)
    events = []
    t = 0
    while t < horizon_ms:
        t += rng.expovariate(1 / noise_gap_ms)
        events.append((int(t), rng.choice([ThreatKind.RATE_EXCEEDED, ThreatKind.FORGERY]), "noise"))
    start = rng.randrange(horizon_ms // 2, horizon_ms)
    for i in range(20):
        events.append((start + i * burst_rate_ms, ThreatKind.FORGERY, "attack"))
    events.sort(key=lambda e: e[0])
    for at, kind, label in events:
        link = breaker.observe(ThreatEvent(at, kind, label), at)
        if breaker.isolated:
            return (link.tripped_at - start) if link.tripped_at >= start else None
    return float("inf")


def main():
    logging.getLogger("sentinel.breaker").setLevel(logging.ERROR)
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--trials", type=int, default=300)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--burst-ms", type=int, default=400)
    ap.add_argument("--noise-gap-ms", type=int, default=3_000)
    args = ap.parse_args()
    print(f"{'k':>3}{'window_ms':>11}{'detected':>10}{'mean_delay_ms':>15}{'false_trips':>13}")
    for k in (2, 3, 5, 8):
        for window in (1_000, 5_000, 10_000):
            rng = random.Random(args.seed)
            policy = DetectionPolicy(threshold=k, window=window)
            results = [trial(policy, rng, args.burst_ms, args.noise_gap_ms) for _ in range(args.trials)]
            delays = [r for r in results if r is not None and r != float("inf")]
            false_trips = sum(r is None for r in results)
            mean = statistics.mean(delays) if delays else float("nan")
            print(f"{k:>3}{window:>11}{len(delays):>10}{mean:>15.1f}{false_trips:>13}")


if __name__ == "__main__":
    main()
