"""Generate spanning driving cycles and show how well they cover speed space.

Prints the speed-decile by acceleration-sign occupancy of one hour of raw
profiles, then drives the surrogate plant through a single spanning episode
and summarises what the recorded data looks like.

    python demos/cycle_coverage.py --hours 1 --seed 0
"""

import argparse

import numpy as np

from deeptruck.cyclegen import CycleGenConfig, generate_spanning_episode, profile_coverage, spanning_profiles
from deeptruck.plant import PlantConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--hours", type=float, default=1.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = CycleGenConfig()
    profiles = spanning_profiles(cfg, args.hours, seed=args.seed)
    table = profile_coverage(profiles, cfg)
    edges = np.linspace(cfg.v_min, cfg.v_max, len(table) + 1)
    print(f"{len(profiles)} spanning profiles, {args.hours:g} h")
    print("speed bin [m/s]   decel   accel")
    for lo, hi, (dec, acc) in zip(edges[:-1], edges[1:], table):
        print(f"{lo:5.1f} - {hi:5.1f}   {dec:6d}  {acc:6d}")

    # smoothing caps the speed below v_max, so the raw profile alone spans the range
    v_raw = np.concatenate([p.v_raw for p in profiles])
    v_f = np.concatenate([p.v_f for p in profiles])
    print(f"raw speed range      [{v_raw.min():.2f}, {v_raw.max():.2f}] m/s")
    print(f"smoothed speed range [{v_f.min():.2f}, {v_f.max():.2f}] m/s")

    ep = generate_spanning_episode(cfg, np.random.default_rng(args.seed), PlantConfig())
    print(f"\none plant episode: {ep.duration:.0f} s, mean |v - reference| "
          f"{np.mean(np.abs(ep.v - ep.meta['reference'])):.2f} m/s, "
          f"engine active {np.mean(ep.E_cmd > 0):.0%}, brake active {np.mean(ep.B_cmd > 0):.0%}")


if __name__ == "__main__":
    main()
