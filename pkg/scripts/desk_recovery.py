"""Train the desk profile on noiseless and noisy synthetic data and report validation r."""

import argparse
import time
from pathlib import Path

from vibe.dataio import SynthConfig, gen_synthetic
from vibe.trainer import TrainConfig, train

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "desk.txt"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--noise", type=float, nargs="+", default=[0.0, 0.3])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config", default=str(CONFIG))
    args = ap.parse_args()
    cfg = TrainConfig.from_file(args.config, {"seed": str(args.seed)})
    for sigma in args.noise:
        ds = gen_synthetic(SynthConfig(noise=sigma), args.seed)
        t0 = time.perf_counter()
        _, _, log = train(ds, cfg)
        print(f"noise={sigma}: best val r {log.best_val_r:.4f} at epoch {log.best_epoch}/{log.stop_epoch}, "
              f"{time.perf_counter() - t0:.1f} s")


if __name__ == "__main__":
    main()
