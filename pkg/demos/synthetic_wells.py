"""Generate a small synthetic field and look at its basic shape.

Walks the data layer end to end: build a generator spec, sample a few
wells, z-score them with training statistics, and slice one into
overlapping windows.
"""

import numpy as np

from lithoflow.welldata import (
    compute_stats,
    make_synth_spec,
    normalize,
    synth_wells,
    window,
    window_count,
)


def main():
    spec = make_synth_spec(num_classes=4, num_channels=3, stay_prob=0.9,
                           emission_sep=1.5, emission_std=0.5, seed=0)
    print("class-mean table (classes x channels):")
    print(spec.emission_mean)
    print("transition matrix (sticky diagonal):")
    print(np.round(spec.transition, 3))

    wells = synth_wells(spec, num_wells=4, T=240)
    for w in wells:
        runs = np.sum(np.diff(w.labels) != 0) + 1
        print(f"{w.well_id}: T={w.T}, depth {w.depths[0]:.1f}..{w.depths[-1]:.1f} m, "
              f"{runs} beds, mean bed {w.T / runs * spec.interval:.1f} m")

    # ------------------------------------------------------------------
    # normalize with training statistics only, then reuse them everywhere
    # ------------------------------------------------------------------
    train, held_out = wells[:3], wells[3]
    stats = compute_stats(train)
    print("\nper-channel (mu, sigma) from the 3 training wells:")
    for name, (mu, sigma) in sorted(stats.items()):
        print(f"  {name}: mu={mu:+.3f} sigma={sigma:.3f}")
    scored = normalize(held_out, stats)
    print(f"held-out well after z-scoring: mean={scored.channels.mean():+.3f} "
          f"(not exactly 0, its stats came from the other wells)")

    # ------------------------------------------------------------------
    # windowing: count is (T - L) // S + 1
    # ------------------------------------------------------------------
    L, S = 16, 4
    wins = window(scored, L, S)
    print(f"\nwindows of L={L}, S={S} over T={scored.T}: "
          f"{len(wins)} (formula gives {window_count(scored.T, L, S)})")
    first = wins[0]
    print(f"first window: rows={first.values.shape[0]}, "
          f"channels={first.values.shape[1]}, labels={first.labels[:8]}...")


if __name__ == "__main__":
    main()
