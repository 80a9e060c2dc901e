"""``granite`` command line front end."""
import argparse
import json
import logging
import sys
from pathlib import Path

from . import clusterlab, pipeline
from ._accel import thread_count
from .cednet import TrainConfig


def _floats(s):
    return tuple(float(v) for v in s.split(","))


def _pair(s):
    parts = s.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected <pred.jsonl>,<truth.jsonl>")
    return tuple(parts)


def build_parser():
    p = argparse.ArgumentParser(prog="granite", description=__doc__)
    p.add_argument("--config", help="JSON file of flag defaults (top level or per subcommand)")
    p.add_argument("--threads", type=int, default=None, help="worker count (env GRANITE_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("generate", help="synthesize microstructures")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--size", type=int, default=128)
    g.add_argument("--mu", type=float, default=2.3)
    g.add_argument("--sigma", type=float, default=0.4)
    g.add_argument("--cutoff", type=float, default=4.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--ratios", type=_floats, default=(0.7, 0.1, 0.2))
    g.add_argument("--out", required=True)

    s = sub.add_parser("solve", help="FFT elasticity solve per microstructure")
    s.add_argument("--in", dest="in_dir", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--max-iter", type=int, default=5000)
    s.add_argument("--e33", type=float, default=1e-4)

    pp = sub.add_parser("preprocess", help="coarsen, scale and split into datasets")
    pp.add_argument("--ms", required=True)
    pp.add_argument("--vm", required=True)
    pp.add_argument("--manifest", required=True)
    pp.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train the encoder-decoder")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--epochs", type=int, default=4000)
    t.add_argument("--batch", type=int, default=100)
    t.add_argument("--base-lr", type=float, default=1e-4)
    t.add_argument("--max-lr", type=float, default=0.1)
    t.add_argument("--cycle", type=int, default=200)
    t.add_argument("--patience", type=int, default=200)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--r", type=int, default=1)

    pr = sub.add_parser("predict", help="predict coarse stress fields")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--in", dest="in_dir", required=True, help="preprocessed dataset dir")
    pr.add_argument("--split", default="test")
    pr.add_argument("--out", required=True)

    d = sub.add_parser("detect", help="peak-stress cluster detection")
    d.add_argument("--in", dest="in_dir", required=True)
    d.add_argument("--k", type=int, default=3)
    d.add_argument("--thresholds", type=_floats, default=clusterlab.THRESHOLDS)
    d.add_argument("--sigma", type=float, default=1.0)
    d.add_argument("--out", required=True)

    e = sub.add_parser("evaluate", help="metrics, cluster errors, curves, ablation")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--clusters", type=_pair, default=None)
    e.add_argument("--ms", default=None, help="microstructure dir for curves.csv")
    e.add_argument("--ckpt", default=None, help="checkpoint for ablation.csv")
    e.add_argument("--data", default=None, help="dataset dir for ablation.csv")
    e.add_argument("--bins", type=int, default=10)
    e.add_argument("--n-sigma", type=float, default=2.0)
    e.add_argument("--out", required=True)

    a = sub.add_parser("ablate", help="first-layer filter ablation and typing")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--split", default="test")
    a.add_argument("--out", required=True)

    r = sub.add_parser("run-all", help="end-to-end resumable pipeline")
    r.add_argument("--run-dir", required=True)
    return p


def _apply_config(parser, argv):
    """Re-parse with defaults taken from ``--config``; explicit flags still win."""
    args = parser.parse_args(argv)
    if not args.config or args.cmd == "run-all":
        return args
    data = json.loads(Path(args.config).read_text())
    section = data.get(args.cmd, data)
    sub = parser._subparsers._group_actions[0].choices[args.cmd]
    known = {a.dest for a in sub._actions}
    sub.set_defaults(**{k.replace("-", "_"): v for k, v in section.items()
                        if k.replace("-", "_") in known})
    return parser.parse_args(argv)


def main(argv=None):
    parser = build_parser()
    args = _apply_config(parser, argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = args.threads if args.threads is not None else thread_count()
    try:
        return _dispatch(args, threads)
    except pipeline.StageError as exc:
        print(f"granite: {exc}", file=sys.stderr)
        return 2


def _dispatch(args, threads):
    c = args.cmd
    if c == "generate":
        pipeline.generate_stage(args.n, args.out, args.seed, args.size, args.mu, args.sigma,
                                args.cutoff, args.ratios, threads)
    elif c == "solve":
        pipeline.solve_stage(args.in_dir, args.out, args.tol, args.max_iter, args.e33, threads)
    elif c == "preprocess":
        pipeline.preprocess_stage(args.ms, args.vm, args.manifest, args.out)
    elif c == "train":
        cfg = TrainConfig(batch_size=args.batch, epochs=args.epochs, base_lr=args.base_lr,
                          max_lr=args.max_lr, cycle=args.cycle, patience=args.patience,
                          seed=args.seed)
        _, hist = pipeline.train_stage(args.data, args.out, cfg, args.r)
        print(json.dumps({"best_epoch": hist.best_epoch, "val_mse": hist.best_val}))
    elif c == "predict":
        pipeline.predict_stage(args.ckpt, args.in_dir, args.out, args.split)
    elif c == "detect":
        pipeline.detect_stage(args.in_dir, args.out, args.k, args.thresholds, args.sigma)
    elif c == "evaluate":
        summary = pipeline.evaluate_stage(args.pred, args.truth, args.out, args.clusters,
                                          args.ms, args.ckpt, args.data, args.bins,
                                          args.n_sigma)
        print(json.dumps({k: summary[k] for k in ("n", "mse_mean", "cosine_mean")}))
    elif c == "ablate":
        pipeline.ablate_stage(args.ckpt, args.data, args.out, args.split)
    elif c == "run-all":
        cfg_path = args.config
        cfg = pipeline.PipelineConfig.load(cfg_path) if cfg_path else pipeline.PipelineConfig()
        if args.threads is not None:
            cfg.threads = args.threads
        pipeline.run_all(cfg, args.run_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
