"""Full-coordinate gradient check of forward + loss over many random small configurations.

For each configuration prints the worst relative error at each step size, so
roundoff (error falls as h grows) can be told apart from a wrong gradient.
"""

import argparse

import numpy as np

from vibe import autodiff as ad
from vibe import model as M
from vibe.dataio import FeatureSpec, SynthConfig, gen_synthetic
from vibe.trainer import pearson_mse_loss


def grad_config(seed):
    rng = np.random.default_rng(seed)
    feats = (FeatureSpec("text", int(rng.integers(3, 7))), FeatureSpec("audio", int(rng.integers(3, 7))),
             FeatureSpec("extra", 3, True))
    n_tr, n_parcels = int(rng.integers(10, 17)), int(rng.integers(4, 9))
    scfg = SynthConfig(features=feats, n_train=1, n_val=0, n_test=0, n_tr=n_tr, n_parcels=n_parcels, n_subjects=2,
                       assignment={"Default": "text", "SomMot": "audio"})
    run = gen_synthetic(scfg, seed).runs[0]
    hrf = ["off", "fixed", "learned"][int(rng.integers(3))]
    mcfg = M.ModelConfig(features=feats, n_subjects=2, n_parcels=n_parcels, d_proj=8, d_model=8, n_heads=2,
                         mask=str(rng.choice(["none", "causal"])),
                         hrf=M.HrfConfig(enabled=hrf != "off", mode="fixed" if hrf == "off" else hrf))
    return run, mcfg, M.init_params(mcfg, rng, np.float64)


def worst_error(seed, h):
    run, mcfg, params = grad_config(seed)
    target = run.targets.astype(np.float64)
    worst, where = 0.0, ""
    for name, p in params.items():
        def loss(x, name=name):
            pp = {k: v.detach() for k, v in params.items()}
            pp[name] = x
            return pearson_mse_loss(M.forward(run, pp, mcfg), target)
        e = ad.grad_check(loss, p, h=h)
        if e > worst:
            worst, where = e, name
    return worst, where


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--steps", type=float, nargs="+", default=[1e-5, 1e-4])
    args = ap.parse_args()
    for seed in range(args.seeds):
        cols = [f"h={h:g}: {e:.2e} ({name})" for h in args.steps for e, name in [worst_error(seed, h)]]
        print(f"seed {seed}: " + "; ".join(cols), flush=True)


if __name__ == "__main__":
    main()
