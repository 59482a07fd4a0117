"""Learn a CACC policy inside a replica and try it on the surrogate plant.

Needs a replica checkpoint, e.g. ``<run>/train-model/model.ckpt`` from
``deeptruck run manifests/desk.cfg`` or ``demos/replica_training.py --save``.

    python demos/cacc_policy.py --model desk-run/train-model/model.ckpt --iterations 200
"""

import argparse

import numpy as np

from deeptruck.cacc import CaccConfig, CaccEnv, DeepEgo, PlantEgo
from deeptruck.model import DeepTruckModel
from deeptruck.pipeline import control_summary
from deeptruck.plant import PlantConfig
from deeptruck.policy import PgConfig, train_policy
from deeptruck.stats import control_error_stats


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--model", required=True)
    ap.add_argument("--iterations", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cacc = CaccConfig()
    deep = CaccEnv(cacc, DeepEgo(DeepTruckModel.load(args.model), cacc.idle_fuel_rate))
    plant = CaccEnv(cacc, PlantEgo(PlantConfig()))

    policy, _, curve = train_policy(deep, PgConfig(iterations=args.iterations, seed=args.seed))
    for r in curve.rows[:: max(1, len(curve.rows) // 10)]:
        print(f"iter {r.iteration:4d}  discounted return {r.average_discounted_return:12.1f}  crashes {r.crashes}")

    for name, env, n in (("replica", deep, 100), ("plant", plant, 10)):
        s = control_summary(control_error_stats(env, policy.act_deterministic, n, np.random.default_rng(7)))
        print(f"{name:8s} {s['fraction_settled']:.0%} settled, {s['crashes']} crashes, "
              f"steady-state time-gap error {s['steady_state_mean_time_gap_error']:+.3f} s")


if __name__ == "__main__":
    main()
