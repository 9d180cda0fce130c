"""Command-line entry point: ``vibe {gen,align,train,predict,ensemble,eval,msa}``."""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import align as al
from .autodiff import NonFiniteError
from .dataio import (ConfigError, FeatureSpec, FormatError, SynthConfig, env_out_dir, gen_synthetic, load_dataset,
                     read_kv, read_tensor, save_dataset, write_tensor)
from .ensemble import EnsembleError, EnsembleSpec, run_ensemble
from .evaluation import EvalError, evaluate, write_report
from .model import ModelConfigError, load_checkpoint, predict, save_checkpoint
from .msa import (AttributionError, coalitions, model_game, shapley_exact, shapley_sampled, training_means,
                  write_shapley_report)
from .trainer import (STREAM_SAMPLING, TrainConfig, TrainingDiverged, retrain_full, stitch_networks, substream,
                      train)

log = logging.getLogger("vibe")

CONFIG_ERRORS = (ConfigError, FormatError, ModelConfigError, al.AlignmentError, EvalError, EnsembleError,
                 AttributionError, FileNotFoundError)

_TRAIN_HELP = {
    "max_epochs": "maximum training epochs",
    "batch_size": "sequences per optimiser step",
    "lr": "peak learning rate (cosine decay to zero)",
    "beta1": "AdamW first-moment decay",
    "beta2": "AdamW second-moment decay",
    "weight_decay": "decoupled weight decay",
    "clip_norm": "global gradient l2 clipping threshold",
    "lambda_mse": "weight of the MSE term next to the correlation loss",
    "patience": "epochs without validation improvement before stopping",
    "seed": "seed for weight init and batch order",
    "mask": "temporal attention mask: none | causal",
    "network": "restrict the loss to one network (visual, default, ...) or all",
    "hrf": "output HRF convolution: off | fixed | learned",
    "chunk_len": "split runs into windows of this many TRs (0 = whole runs)",
    "d_model": "prediction transformer width",
    "ffn_mult": "feed-forward expansion factor",
}


class CliConfigError(Exception):
    pass


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show defaults only for options that have one and do not already state it."""

    def _get_help_string(self, action):
        if action.default is None or action.default is False or "default:" in (action.help or ""):
            return action.help
        return super()._get_help_string(action)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file with training options (flags override it)")
    defaults = TrainConfig()
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = {"int": int, "float": float}.get(f.type, str)
        p.add_argument(flag, dest=f.name, type=kind, default=None,
                       help=f"{_TRAIN_HELP.get(f.name, f.name)} (default: {getattr(defaults, f.name)})")


def _train_config(args) -> TrainConfig:
    """Config file first, then each command-line override; errors name the file or flag at fault."""
    path = getattr(args, "config", None)
    if path and not Path(path).exists():
        raise CliConfigError(f"--config: file not found: {path}")
    try:
        raw = read_kv(path) if path else {}
        TrainConfig.from_strings(raw)
    except (ConfigError, FormatError) as exc:
        raise CliConfigError(f"--config {path}: {exc}") from None
    for f in fields(TrainConfig):
        val = getattr(args, f.name, None)
        if val is None:
            continue
        raw[f.name] = str(val)
        try:
            TrainConfig.from_strings(raw)
        except ConfigError as exc:
            raise CliConfigError(f"--{f.name.replace('_', '-')}: {exc}") from None
    return TrainConfig.from_strings(raw)


def _out(args, default: str) -> Path:
    return Path(args.out) if args.out else Path(env_out_dir()) / default


def _runs(ds, split: str):
    if split == "all":
        return ds.runs
    runs = ds.split(split)
    if not runs:
        raise CliConfigError(f"--split: dataset has no {split!r} runs")
    return runs


# -- subcommands ---------------------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = SynthConfig()
    if args.config:
        raw = read_kv(args.config)
        feats = []
        for key, val in raw.items():
            if key.startswith("feature."):
                name = key[len("feature."):]
                dim, _, opt = val.partition(":")
                feats.append(FeatureSpec(name, int(dim), opt == "optional"))
            elif key.startswith("assign."):
                cfg.assignment[key[len("assign."):]] = val
            elif hasattr(cfg, key) and key not in ("features", "assignment"):
                cur = getattr(cfg, key)
                setattr(cfg, key, type(cur)(val))
            else:
                raise CliConfigError(f"--config {args.config}: unknown key {key!r}")
        if feats:
            cfg.features = tuple(feats)
    for key in ("noise", "n_tr", "n_parcels", "n_train", "n_subjects"):
        val = getattr(args, key)
        if val is not None:
            setattr(cfg, key, val)
    out = _out(args, "data")
    ds = gen_synthetic(cfg, args.seed)
    save_dataset(ds, out)
    print(f"wrote {len(ds.runs)} runs, {ds.atlas.n_parcels} parcels to {out}")
    return 0


def cmd_align(args) -> int:
    grid = al.TRGrid(args.n_tr, args.tr)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.kind == "tokens":
        if not args.times or not args.vectors:
            raise CliConfigError("--times and --vectors are required for --kind tokens")
        stream = al.TokenStream(read_tensor(args.times), read_tensor(args.vectors))
        feats, empty = al.tokens_to_tr(stream, grid)
        write_tensor(out, feats.astype(np.float32))
        write_tensor(out.with_suffix(".empty.vten"), empty.astype(np.float32))
    else:
        if not args.frames or args.rate is None:
            raise CliConfigError(f"--frames and --rate are required for --kind {args.kind}")
        stream = al.FrameStream(args.rate, read_tensor(args.frames))
        if args.kind == "frames":
            feats = al.window_stats(stream, grid, args.window, args.tail)
        else:
            feats = al.grid_stream_to_tr(stream, grid, args.pool, args.pool)
        write_tensor(out, feats.astype(np.float32))
    print(f"wrote {feats.shape[0]} x {feats.shape[1]} features to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args)
    ds = load_dataset(args.data)
    out = _out(args, "train")
    params, mcfg, tlog = train(ds, cfg)
    extra = {"seed": cfg.seed, "best_epoch": tlog.best_epoch, "stop_epoch": tlog.stop_epoch,
             "network": cfg.network}
    if args.retrain:
        params, mcfg, rlog = retrain_full(ds, tlog.stop_epoch, cfg)
        extra["retrained_epochs"] = rlog.stop_epoch
    save_checkpoint(out / "checkpoint", params, mcfg, extra)
    (out / "train_log.txt").write_text(tlog.to_text())
    print(f"best epoch {tlog.best_epoch}, val r {tlog.best_val_r:.4f}; checkpoint in {out / 'checkpoint'}")
    return 0


def cmd_predict(args) -> int:
    ds = load_dataset(args.data)
    params, mcfg, _ = load_checkpoint(args.checkpoint)
    if args.mask:
        mcfg.mask = args.mask
    runs = _runs(ds, args.split)
    stitched = None
    if args.stitch:
        vis, dmn = (load_checkpoint(c) for c in args.stitch)
        stitched = (vis, dmn)
    out = _out(args, "predictions")
    out.mkdir(parents=True, exist_ok=True)
    for r in runs:
        pred = predict(r, params, mcfg)
        if stitched:
            pv = predict(r, stitched[0][0], stitched[0][1])
            pd = predict(r, stitched[1][0], stitched[1][1])
            pred = stitch_networks(pred, pv, pd, ds.atlas)
        write_tensor(out / f"{r.run_id}.vten", pred)
    print(f"wrote predictions for {len(runs)} runs to {out}")
    return 0


def cmd_ensemble(args) -> int:
    cfg = _train_config(args)
    ds = load_dataset(args.data)
    out = _out(args, "ensemble")
    spec = EnsembleSpec(args.n_members, cfg.seed if args.base_seed is None else args.base_seed)
    members, ens = run_ensemble(ds, cfg, spec, jobs=args.jobs, out_dir=out)
    print(f"trained {len(members)} members (seeds {spec.seeds}); averaged predictions in {out / 'ensemble'}")
    return 0


def cmd_eval(args) -> int:
    ds = load_dataset(args.data)
    runs = _runs(ds, args.split)
    pdir = Path(args.predictions)
    if not pdir.is_dir():
        raise CliConfigError(f"--predictions: not a directory: {pdir}")
    preds, targets = {}, {}
    for r in runs:
        f = pdir / f"{r.run_id}.vten"
        if not f.exists():
            raise CliConfigError(f"--predictions: missing {f}")
        if r.targets is None:
            raise CliConfigError(f"--split: run {r.run_id} has no targets")
        preds[r.run_id] = read_tensor(f)
        targets[r.run_id] = r.targets
    report = evaluate(preds, targets, ds.atlas)
    base = _out(args, "report")
    csv_path, txt_path = write_report(report, base)
    print(f"mean r {report.mean_r:.4f}; wrote {csv_path} and {txt_path}")
    return 0


def cmd_msa(args) -> int:
    ds = load_dataset(args.data)
    params, mcfg, _ = load_checkpoint(args.checkpoint)
    runs = _runs(ds, args.split)
    means = training_means(ds.train, mcfg.set_names) if args.mode == "mean" else None
    game = model_game(params, mcfg, runs, args.mode, means)
    if args.jobs > 1 and args.estimator == "exact":
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            list(pool.map(game, coalitions(game.n_players)))
    if args.estimator == "exact":
        report = shapley_exact(game)
    else:
        report = shapley_sampled(game, args.permutations, seed=substream(args.seed, STREAM_SAMPLING))
    report.lesion_mode = args.mode
    out = _out(args, "msa")
    write_shapley_report(report, out, ds.atlas)
    print(f"{report.estimator} Shapley values for {len(report.names)} sets written to {out}")
    return 0


# -- parser ------------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vibe", description="Multi-modal fMRI encoding toolkit.",
                                     formatter_class=_Formatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = _Formatter

    p = sub.add_parser("gen", help="generate a synthetic dataset with planted ground truth", formatter_class=fmt)
    p.add_argument("--config", help="key=value generator config (feature.<name>=<dim>[:optional], assign.<net>=<set>)")
    p.add_argument("--out", help="output directory ($VIBE_OUT/data if omitted)")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--noise", type=float, default=None, help="target noise sigma (default: 0.0)")
    p.add_argument("--n-tr", dest="n_tr", type=int, default=None, help="TRs per run (default: 400)")
    p.add_argument("--n-parcels", dest="n_parcels", type=int, default=None, help="parcels (default: 100)")
    p.add_argument("--n-train", dest="n_train", type=int, default=None, help="training runs (default: 8)")
    p.add_argument("--n-subjects", dest="n_subjects", type=int, default=None, help="subjects (default: 4)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("align", help="align raw feature streams to the TR grid", formatter_class=fmt)
    p.add_argument("--kind", choices=("tokens", "frames", "grid"), required=True, help="stream type")
    p.add_argument("--times", help="VTEN vector of token times in seconds (tokens)")
    p.add_argument("--vectors", help="VTEN N x D token vectors (tokens)")
    p.add_argument("--frames", help="VTEN N x D frames (frames) or N x H x W x D grids (grid)")
    p.add_argument("--rate", type=float, help="frames per second (frames, grid)")
    p.add_argument("--tr", type=float, default=al.DEFAULT_TR, help="repetition time in seconds")
    p.add_argument("--n-tr", dest="n_tr", type=int, required=True, help="TRs in the output grid")
    p.add_argument("--window", type=float, default=10.0, help="sliding window length in seconds (frames)")
    p.add_argument("--tail", type=float, default=None, help="retained window tail in seconds (default: tr)")
    p.add_argument("--pool", type=int, default=3, help="adaptive pooling output size (grid)")
    p.add_argument("--out", required=True, help="output VTEN path")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("train", help="train one model with early stopping", formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", help="output directory ($VIBE_OUT/train if omitted)")
    p.add_argument("--retrain", action="store_true", help="retrain on train+val for the early-stopping epoch count")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict parcel time series", formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--checkpoint", required=True, help="checkpoint of the all-parcel model")
    p.add_argument("--stitch", nargs=2, metavar=("VISUAL", "DEFAULT"),
                   help="specialist checkpoints whose Visual / Default parcels replace the main model's")
    p.add_argument("--split", default="val", choices=("train", "val", "test", "all"),
                   help="runs to use")
    p.add_argument("--mask", choices=("none", "causal"), help="override the checkpoint's attention mask")
    p.add_argument("--out", help="output directory ($VIBE_OUT/predictions if omitted)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ensemble", help="train a seed ensemble and average predictions", formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", help="output directory ($VIBE_OUT/ensemble if omitted)")
    p.add_argument("--n-members", dest="n_members", type=int, default=5)
    p.add_argument("--base-seed", dest="base_seed", type=int, default=None, help="first member seed (default: --seed)")
    p.add_argument("--jobs", type=int, default=1, help="parallel member processes")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("eval", help="score predictions against targets", formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--predictions", required=True, help="directory of <run_id>.vten predictions")
    p.add_argument("--split", default="val", choices=("train", "val", "test", "all"),
                   help="runs to use")
    p.add_argument("--out", help="report path without suffix ($VIBE_OUT/report if omitted)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("msa", help="Shapley attribution of feature sets per parcel", formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--split", default="val", choices=("train", "val", "test", "all"),
                   help="runs to use")
    p.add_argument("--mode", default="mean", choices=("mean", "zero"), help="lesion operator")
    p.add_argument("--estimator", default="exact", choices=("exact", "sampled"))
    p.add_argument("--permutations", type=int, default=200, help="orderings for the sampled estimator")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--jobs", type=int, default=1, help="threads for coalition evaluation")
    p.add_argument("--out", help="output directory ($VIBE_OUT/msa if omitted)")
    p.set_defaults(func=cmd_msa)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliConfigError, *CONFIG_ERRORS) as exc:
        print(f"vibe {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, NonFiniteError) as exc:
        print(f"vibe {args.command}: diverged: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"vibe {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
