"""Fit a small LSTM replica to surrogate-plant data and test it open loop.

The defaults are sized to finish in a minute or two; pass ``--hours 4
--full`` for the desk-scale model (several minutes).

    python demos/replica_training.py --hours 0.5 --epochs 60
"""

import argparse

import numpy as np

from deeptruck.cyclegen import CycleGenConfig, generate_dataset
from deeptruck.model import DeepTruckModel, IoSpec
from deeptruck.plant import PlantConfig
from deeptruck.stats import model_error_stats
from deeptruck.train import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--hours", type=float, default=0.5)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--full", action="store_true", help="use the default network and epoch count")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--save", help="write the trained replica checkpoint to this path")
    args = ap.parse_args()

    cg, plant = CycleGenConfig(), PlantConfig()
    train_eps = generate_dataset(cg, plant, args.hours, seed=args.seed)
    held_out = generate_dataset(cg, plant, max(0.25, args.hours / 4), seed=args.seed + 100)
    print(f"{len(train_eps)} training episodes, {sum(e.duration for e in train_eps) / 3600:.2f} h")

    cfg = TrainConfig() if args.full else TrainConfig(epochs=args.epochs, hidden_size=32, decoder_sizes=(32, 32))
    rng = np.random.default_rng(args.seed)
    model = DeepTruckModel.initialize(IoSpec.from_episodes(train_eps), rng, cfg.hidden_size, cfg.decoder_sizes)
    model, curve = train(model, train_eps, cfg, rng)
    d = curve.deploy_form_loss
    if args.save:
        model.save(args.save)
    print(f"deployment-form loss: epoch 0 {d[0]:.4f}, final {d[-1]:.4f}, best {min(d):.4f}")

    val = model_error_stats(model, held_out, horizon=400, trials=60, rng=np.random.default_rng(1))
    v, a = val.stats.channel("v"), val.stats.channel("a")
    print(f"40 s open-loop trials: max |mean speed error| {np.abs(v['mean']).max():.3f} m/s, "
          f"{val.fraction_within('v', 1.5):.0%} of trials within 1.5 m/s, "
          f"max |mean accel error| {np.abs(a['mean']).max():.3f} m/s^2")
    for k in (0, 100, 200, 300, 400):
        print(f"  t = {k / 10:4.0f} s   speed error {v['mean'][k]:+.3f} +- {v['std'][k]:.3f} m/s")


if __name__ == "__main__":
    main()
