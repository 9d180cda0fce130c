"""Compare a Visual-masked specialist with the all-parcel model on Visual parcels over several seeds."""

import argparse
from pathlib import Path

import numpy as np

from vibe.dataio import SynthConfig, gen_synthetic
from vibe.evaluation import parcelwise_pearson
from vibe.model import predict
from vibe.trainer import TrainConfig, stitch_networks, train

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "desk.txt"


def visual_r(ds, params, mcfg, ref=None):
    vis = ds.atlas.mask("Visual")
    rs = []
    for run in ds.val:
        pred = predict(run, params, mcfg)
        if ref is not None:
            base = predict(run, *ref)
            pred = stitch_networks(base, pred, base, ds.atlas)
        rs.append(parcelwise_pearson(pred, run.targets)[vis].mean())
    return float(np.mean(rs))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--noise", type=float, default=0.0)
    ap.add_argument("--patience", type=int, default=None, help="override the profile's patience")
    ap.add_argument("--config", default=str(CONFIG))
    args = ap.parse_args()
    for seed in args.seeds:
        over = {"seed": str(seed)}
        if args.patience:
            over["patience"] = str(args.patience)
        cfg = TrainConfig.from_file(args.config, over)
        ds = gen_synthetic(SynthConfig(noise=args.noise), seed)
        pa, ma, la = train(ds, cfg)
        pv, mv, lv = train(ds, cfg.replace(network="Visual"))
        a = visual_r(ds, pa, ma)
        s = visual_r(ds, pv, mv, ref=(pa, ma))
        print(f"seed {seed}: all {a:.4f} (stop {la.stop_epoch}), stitched {s:.4f} (stop {lv.stop_epoch}), "
              f"delta {s - a:+.4f}", flush=True)


if __name__ == "__main__":
    main()
