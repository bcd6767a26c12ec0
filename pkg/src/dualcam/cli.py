"""Command-line entry points: gen-data | train | eval | gradcheck | gmm-debug.

Heavy imports happen inside the handlers so DUPL_THREADS can cap BLAS
worker threads before numpy loads.
"""

from __future__ import annotations

import argparse
import os
import sys


def _apply_thread_cap():
    cap = os.environ.get("DUPL_THREADS")
    if cap:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def _cmd_gen_data(args) -> int:
    from .data import generate_dataset
    manifest = generate_dataset(args.n_train, args.n_val, args.size, args.size,
                                args.classes, args.seed, args.out)
    print(f"wrote {manifest}")
    return 0


def _build_config(args):
    from .config import TrainConfig, apply_ablations, load_config
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if args.data is not None:
        cfg.data_dir = args.data
    if args.iters is not None:
        cfg.total_iters = args.iters
    if getattr(args, "dump_labels", False):
        cfg.dump_labels = True
    if args.ablate:
        apply_ablations(cfg, args.ablate)
    return cfg.validate()


def _cmd_train(args) -> int:
    from .train import train
    summary = train(_build_config(args))
    final = summary["final_eval"]
    if final is not None:
        mean = final["mean"]
        print(f"final: seg_miou={mean['seg_miou']:.4f} "
              f"pseudolabel_miou={mean['pseudolabel_miou']:.4f} "
              f"oa_fg_mean={mean['oa_fg_mean']:.4f}")
    print(f"checkpoint: {summary['checkpoint']}")
    print(f"metrics: {summary['metrics']}")
    return 0


def _cmd_eval(args) -> int:
    import numpy as np

    from .data import load_dataset
    from .train import MetricLog, _log_eval, build_model, evaluate_model

    cfg = _build_config(args)
    model = build_model(cfg)
    model.load_checkpoint(args.checkpoint)
    samples = load_dataset(cfg.data_dir, split=args.split)

    taus = [None]
    if args.sweep_tau_h:
        taus = [round(x, 2) for x in np.arange(0.40, 0.91, 0.05)]
    for tau in taus:
        dump = os.path.join(cfg.out_dir, "labels") if cfg.dump_labels else None
        result = evaluate_model(model, samples, cfg, tau_h=tau, dump_dir=dump)
        mean = result["mean"]
        print(f"tau_h={result['tau_h']:.2f} split={args.split} "
              f"seg_miou={mean['seg_miou']:.4f} "
              f"pseudolabel_miou={mean['pseudolabel_miou']:.4f} "
              f"coverage={mean['pseudolabel_coverage']:.4f} "
              f"oa_fg_mean={mean['oa_fg_mean']:.4f}")
    if args.metrics_out:
        log = MetricLog(args.metrics_out)
        _log_eval(log, 0, result)
        log.close()
        print(f"metrics: {args.metrics_out}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .autodiff import (Tensor, bilinear_resize, conv2d, global_avg_pool,
                           linear, masked_softmax_ce, multilabel_soft_margin,
                           neg_log_one_minus_cosine, relu, stop_gradient)
    from .gradcheck import gradcheck
    import numpy as np

    rng = np.random.default_rng(args.seed)
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3)) * 0.5
    b = rng.standard_normal(4) * 0.1
    wl = rng.standard_normal((5, 4)) * 0.5
    bl = rng.standard_normal(5) * 0.1
    tgt = rng.integers(0, 5, (2, 8, 8))
    seg_tgt = rng.integers(0, 4, (2, 8, 8))
    inc = rng.random((2, 8, 8)) > 0.3
    ybin = (rng.random((2, 4)) > 0.5).astype(float)

    checks = {
        "conv2d": (lambda xx, ww, bb: conv2d(xx, ww, bb, padding=1).sum(), [x, w, b]),
        "conv2d_dilated": (lambda xx, ww, bb:
                           conv2d(xx, ww, bb, padding=5, dilation=5).sum(), [x, w, b]),
        "relu": (lambda xx: relu(xx).sum(), [x + 0.01]),
        "linear": (lambda xx, ww, bb: linear(xx, ww, bb).sum(),
                   [rng.standard_normal((4, 4)), wl[:, :4] if wl.shape[1] >= 4 else wl, bl]),
        "global_avg_pool": (lambda xx: global_avg_pool(xx).sum(), [x]),
        "bilinear_resize": (lambda xx: bilinear_resize(xx, 13, 11).sum(), [x]),
        "masked_softmax_ce": (lambda lg: masked_softmax_ce(lg, tgt, inc),
                              [rng.standard_normal((2, 5, 8, 8))]),
        "multilabel_soft_margin": (lambda lg: multilabel_soft_margin(lg, ybin),
                                   [rng.standard_normal((2, 4))]),
        "discrepancy": (lambda aa, bb: neg_log_one_minus_cosine(aa, bb),
                        [rng.standard_normal((3, 12)), rng.standard_normal((3, 12))]),
        "composite": (lambda xx, ww, bb, wwl, bbl:
                      linear(global_avg_pool(relu(conv2d(xx, ww, bb, stride=2,
                                                         padding=1))), wwl, bbl).sum()
                      + masked_softmax_ce(
                          bilinear_resize(conv2d(xx, ww, bb, padding=1), 8, 8),
                          seg_tgt, np.ones((2, 8, 8), bool)),
                      [x, w, b, wl[:, :4], bl]),
    }
    failed = []
    for name, (fn, arrays) in checks.items():
        result = gradcheck(fn, arrays, seed=args.seed)
        status = "ok" if result.ok() else "FAIL"
        print(f"{name:24s} {status}  frac<tol={result.fraction_within_tol:.3f} "
              f"max_rel_err={result.max_rel_err:.2e} (n={result.n_checked})")
        if not result.ok():
            failed.append(name)
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def _cmd_gmm_debug(args) -> int:
    import numpy as np

    from .filtering import NoiseFilterConfig, fit_gmm_1d, noise_posterior

    raw = []
    with open(args.losses) as fh:
        for line in fh:
            for tok in line.replace(",", " ").split():
                raw.append(float(tok))
    losses = np.asarray(raw)
    cfg = NoiseFilterConfig(gamma=args.gamma, eta=args.eta)
    fit = fit_gmm_1d(losses, cfg)
    post = noise_posterior(fit, losses)
    mask_fraction = float(np.mean(post > cfg.gamma)) \
        if fit.mu_n - fit.mu_c > cfg.eta else 0.0
    print(f"n={fit.n_samples} converged={fit.converged} ll={fit.log_likelihood:.4f}")
    print(f"clean: w={fit.w_c:.4f} mu={fit.mu_c:.4f} sigma={fit.sigma_c:.4f}")
    print(f"noisy: w={fit.w_n:.4f} mu={fit.mu_n:.4f} sigma={fit.sigma_n:.4f}")
    print(f"mask_fraction={mask_fraction:.4f}")
    if args.out:
        import csv as _csv
        hist, edges = np.histogram(losses, bins=args.bins)
        with open(args.out, "w", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow(["record", "field", "value"])
            for k in ("w_c", "mu_c", "sigma_c", "w_n", "mu_n", "sigma_n",
                      "log_likelihood", "n_samples"):
                writer.writerow(["fit", k, getattr(fit, k)])
            writer.writerow(["fit", "mask_fraction", mask_fraction])
            for lo, hi, count in zip(edges[:-1], edges[1:], hist):
                writer.writerow(["hist", f"{lo:.6g}:{hi:.6g}", int(count)])
        print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualcam",
        description="dual-student weakly-supervised segmentation trainer")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic shapes dataset")
    p.add_argument("--n-train", type=int, default=500)
    p.add_argument("--n-val", type=int, default=100)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_gen_data)

    for name, help_text in (("train", "run the training loop"),
                            ("eval", "evaluate a checkpoint")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="flat key = value file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--data", default=None)
        p.add_argument("--iters", type=int, default=None)
        p.add_argument("--ablate", default=None,
                       help="comma list of mechanisms to disable: ds,dis,dta,anf,reg")
        p.add_argument("--dump-labels", action="store_true")
        if name == "train":
            p.set_defaults(fn=_cmd_train)
        else:
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--split", default="val")
            p.add_argument("--sweep-tau-h", action="store_true")
            p.add_argument("--metrics-out", default=None)
            p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("gmm-debug", help="fit the noise GMM to a loss dump")
    p.add_argument("--losses", required=True, help="text file of loss values")
    p.add_argument("--gamma", type=float, default=0.9)
    p.add_argument("--eta", type=float, default=1.0)
    p.add_argument("--bins", type=int, default=30)
    p.add_argument("--out", default=None, help="optional CSV report path")
    p.set_defaults(fn=_cmd_gmm_debug)
    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
