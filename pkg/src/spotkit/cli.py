"""Command-line front end.

Subcommands: ``gen``, ``solve``, ``train``, ``eval``, ``gradcheck`` and
``compare``. Exit status is 0 on success, 2 on a usage error and 1 on a
runtime error. Reports are CSV with a header row; each report also gets an
SVG figure written next to it.
"""

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import csc, detect, fileio, grid, plotting, synth, training
from .autodiff import gradient_check
from .errors import InvalidArgumentError, SpotkitError
from .models import init_convnet_from_data, init_spotnet_from_data, model_for_gradcheck

log = logging.getLogger("spotkit")

GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


def _range(text, cast=float, sep=".."):
    try:
        lo, hi = text.split(sep)
        return cast(lo), cast(hi)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO{sep}HI, got {text!r}") from None


def _int_range(text):
    return _range(text, int)


def _size(text):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None


def _slice(text):
    try:
        lo, hi = text.split(":")
        return slice(int(lo) if lo else None, int(hi) if hi else None)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO:HI, got {text!r}") from None


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(row[h]) for h in header])


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser():
    p = _Parser(prog="spotkit", description="Spot detection by convolutional sparse coding "
                "and unrolled networks.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--size", type=_size, default=(32, 32))
    g.add_argument("--spots", type=_int_range, default=(1, 5))
    g.add_argument("--amp", type=_range, default=(0.4, 0.8))
    g.add_argument("--psf-sigma", type=_range, default=(1.0, 2.0))
    g.add_argument("--bg-beta", type=float, default=0.15)
    g.add_argument("--bg-sigma", type=float, default=6.0)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--min-sep", type=float, default=6.0)
    g.add_argument("--margin", type=float, default=None)
    g.add_argument("--start", type=int, default=0, help="first image index")
    g.add_argument("--out", required=True)

    s = sub.add_parser("solve", help="solve the sparse coding problem for one image")
    s.add_argument("--data", required=True)
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--lambda", dest="lam", type=float, required=True)
    s.add_argument("--gamma", type=float, default=0.0)
    s.add_argument("--bg-sigma", type=float, default=8.0)
    s.add_argument("--psf-sigma", type=float, default=None,
                   help="PSF width (default: median spot sigma of the image, else 1.5)")
    s.add_argument("--iters", type=int, default=400)
    s.add_argument("--tol", type=float, default=1e-8)
    s.add_argument("--accelerated", action="store_true")
    s.add_argument("--out-map", required=True, help=".npy file for the coefficient map")
    s.add_argument("--report", required=True)

    t = sub.add_parser("train", help="train a network")
    t.add_argument("--net", choices=("spotnet", "convnet"), required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--layers", type=int, default=3)
    t.add_argument("--kernel-size", type=int, default=None,
                   help="default 11 for spotnet, 7 for convnet")
    t.add_argument("--width", type=int, default=8, help="convnet hidden channels")
    t.add_argument("--tied", action="store_true", help="share spotnet weights across layers")
    t.add_argument("--epochs", type=int, default=60)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--val-frac", type=float, default=0.2)
    t.add_argument("--target-sigma", type=float, default=1.0)
    t.add_argument("--out-model", required=True)
    t.add_argument("--log", required=True)

    e = sub.add_parser("eval", help="score a model with a threshold sweep")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--subset", type=_slice, default=slice(None), help="image range LO:HI")
    e.add_argument("--threshold-sweep", default="0.01:0.15:15")
    e.add_argument("--match-radius", type=float, default=3.0)
    e.add_argument("--nms-radius", type=float, default=2.0)
    e.add_argument("--report", required=True)
    e.add_argument("--pr-svg", required=True)

    c = sub.add_parser("gradcheck", help="finite-difference check of network gradients")
    c.add_argument("--net", choices=("spotnet", "convnet"), required=True)
    c.add_argument("--size", type=_size, default=(12, 12))
    c.add_argument("--layers", type=int, default=3)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--kernel-size", type=int, default=None)
    c.add_argument("--width", type=int, default=8)
    c.add_argument("--eps", type=float, default=1e-6)

    m = sub.add_parser("compare", help="side-by-side detection metrics for several models")
    m.add_argument("--models", required=True, help="comma-separated checkpoint files")
    m.add_argument("--data", required=True)
    m.add_argument("--subset", type=_slice, default=slice(None))
    m.add_argument("--threshold-sweep", default="0.01:0.15:15")
    m.add_argument("--match-radius", type=float, default=3.0)
    m.add_argument("--nms-radius", type=float, default=2.0)
    m.add_argument("--report", required=True)

    for sp in (g, s, t, e, c, m):
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


# -- subcommands --------------------------------------------------------------

def cmd_gen(args):
    (h, w), (n_min, n_max) = args.size, args.spots
    spec = synth.SceneSpec(
        height=h, width=w, n_min=n_min, n_max=n_max,
        amp_min=args.amp[0], amp_max=args.amp[1],
        sigma_min=args.psf_sigma[0], sigma_max=args.psf_sigma[1],
        min_separation=args.min_sep, margin=args.margin,
        bg_beta=args.bg_beta, bg_sigma=args.bg_sigma, noise_std=args.noise, seed=args.seed)
    if args.count < 0:
        raise InvalidArgumentError("--count must be >= 0")
    ds = synth.make_dataset(spec, args.count, start=args.start)
    fileio.write_dataset(args.out, ds)
    print(f"wrote {len(ds)} images ({h}x{w}, {sum(len(s) for s in ds.spots)} spots) "
          f"to {args.out}")


def _load_stack(path, subset=slice(None)):
    ds = fileio.read_dataset(path)
    idx = list(range(len(ds)))[subset]
    if not idx:
        raise SpotkitError(f"{path}: no images selected")
    return ds.subset(idx)


def cmd_solve(args):
    ds = fileio.read_dataset(args.data)
    if not 0 <= args.index < len(ds):
        raise SpotkitError(f"--index {args.index} out of range for {len(ds)} images")
    d = ds.images[args.index]
    spots = ds.spots[args.index]
    sigma = args.psf_sigma
    if sigma is None:
        sigma = float(np.median(spots[:, 3])) if len(spots) else 1.5
    p = csc.CscProblem(d, grid.gaussian_kernel(sigma), args.lam, gamma=args.gamma,
                       bg_sigma=args.bg_sigma)
    if args.accelerated:
        state = csc.fista_solve(p, iters=args.iters, tol=args.tol)
    else:
        state = csc.ista_solve(p, args.iters)
    np.save(args.out_map, state.x)
    rows = [{"iteration": i, "objective": f} for i, f in enumerate(state.history)]
    write_csv(args.report, ["iteration", "objective"], rows)
    plotting.objective_trace(plotting.svg_path_for(args.report), state.history)
    method = "fista" if args.accelerated else "ista"
    print(f"{method}: {state.iteration} iterations, objective {state.objective!r}, "
          f"support {int(np.count_nonzero(state.x))} px")


def _check_model_fits(model, shape, path):
    ks = model.C.shape[1:] if model.arch == "spotnet" else model.weights[0].shape[2:]
    if ks[0] > 2 * shape[0] or ks[1] > 2 * shape[1]:
        raise SpotkitError(f"model {path} has {ks[0]}x{ks[1]} kernels, too large for "
                           f"{shape[0]}x{shape[1]} images")


def cmd_train(args):
    ds = fileio.read_dataset(args.data)
    shapes = {im.shape for im in ds.images}
    if len(shapes) > 1:
        raise SpotkitError(f"{args.data}: images differ in shape {sorted(shapes)}")
    cfg = training.TrainConfig(
        epochs=args.epochs, batch_size=args.batch, lr=args.lr, optimizer=args.optimizer,
        target_sigma=args.target_sigma, seed=args.seed,
        train_frac=1.0 - args.val_frac, val_frac=args.val_frac)
    # calibrate on the training images only
    fit = ds.subset(training.split_indices(len(ds), cfg.val_frac)[0])
    if args.net == "spotnet":
        ks = args.kernel_size or 11
        model = init_spotnet_from_data(fit, args.layers, ks, tied=args.tied)
    else:
        ks = args.kernel_size or 7
        model = init_convnet_from_data(fit, args.layers, args.width, ks, seed=args.seed)
    _check_model_fits(model, next(iter(shapes)), args.net)

    def progress(row):
        log.info("epoch %3d  train %.6g  val %.6g", row["epoch"], row["train_loss"],
                 row["val_loss"])

    best, history = training.train(model, ds, cfg, progress=progress)
    best = fileio.quantize(best)
    fileio.write_checkpoint(args.out_model, best)
    write_csv(args.log, ["epoch", "train_loss", "val_loss"], history)
    plotting.loss_curve(plotting.svg_path_for(args.log), history)
    key = "val_loss" if cfg.val_frac > 0 else "train_loss"
    best_row = min(history, key=lambda r: (r[key], r["epoch"]))
    print(f"{args.net}: {best.param_count()} parameters, best epoch {best_row['epoch']} "
          f"({key} {best_row[key]!r}, untrained {history[0][key]!r})")


def _evaluate(model, ds, thresholds, match_radius, nms_radius):
    maps = training.predict(model, ds.stacked())
    per_image, totals = detect.sweep(maps, ds.spots, thresholds, match_radius, nms_radius)
    return per_image, totals


_EVAL_HEADER = ["threshold", "image", "n_detections", "n_truths", "tp", "fp", "fn",
                "precision", "recall", "f1", "count_error"]


def cmd_eval(args):
    model = fileio.read_checkpoint(args.model)
    ds = _load_stack(args.data, args.subset)
    _check_model_fits(model, ds.images[0].shape, args.model)
    ths = detect.parse_sweep(args.threshold_sweep)
    per_image, totals = _evaluate(model, ds, ths, args.match_radius, args.nms_radius)
    rows = []
    for th, reports, agg in zip(ths, per_image, totals):
        for i, r in enumerate(reports):
            rows.append({"threshold": th, "image": i, "n_detections": r.n_detections,
                         "n_truths": r.n_truths, "tp": r.tp, "fp": r.fp, "fn": r.fn,
                         "precision": r.precision, "recall": r.recall, "f1": r.f1,
                         "count_error": r.count_error})
        rows.append({"threshold": th, "image": "all", "n_detections": agg.tp + agg.fp,
                     "n_truths": agg.tp + agg.fn, "tp": agg.tp, "fp": agg.fp, "fn": agg.fn,
                     "precision": agg.precision, "recall": agg.recall, "f1": agg.f1,
                     "count_error": agg.mean_count_error})
    write_csv(args.report, _EVAL_HEADER, rows)
    plotting.pr_curves(args.pr_svg, {Path(args.model).name: (
        ths, [t.precision for t in totals], [t.recall for t in totals], [t.f1 for t in totals])})
    b = detect.best_threshold(ths, totals)
    print(f"best threshold {ths[b]!r}: precision {totals[b].precision:.4f} "
          f"recall {totals[b].recall:.4f} f1 {totals[b].f1:.4f}")


def cmd_gradcheck(args):
    model, build, params = model_for_gradcheck(args.net, args.size, args.layers, args.seed,
                                               kernel_size=args.kernel_size, width=args.width)
    err = gradient_check(build, params, eps=args.eps, seed=args.seed)
    ok = err <= GRADCHECK_TOL
    print(f"{args.net} {args.size[0]}x{args.size[1]} layers={args.layers} "
          f"params={model.param_count()} max relative error {err:.3e} "
          f"({'ok' if ok else 'FAILED'})")
    return 0 if ok else 1


_COMPARE_HEADER = ["model", "arch", "params", "best_threshold", "precision", "recall", "f1",
                   "count_error", "tp", "fp", "fn", "images"]


def cmd_compare(args):
    paths = [p for p in args.models.split(",") if p]
    if not paths:
        raise InvalidArgumentError("--models needs at least one checkpoint")
    ds = _load_stack(args.data, args.subset)
    ths = detect.parse_sweep(args.threshold_sweep)
    rows, curves = [], {}
    for path in paths:
        model = fileio.read_checkpoint(path)
        _check_model_fits(model, ds.images[0].shape, path)
        _, totals = _evaluate(model, ds, ths, args.match_radius, args.nms_radius)
        b = detect.best_threshold(ths, totals)
        agg = totals[b]
        label = Path(path).name
        rows.append({"model": label, "arch": model.arch, "params": model.param_count(),
                     "best_threshold": ths[b], "precision": agg.precision,
                     "recall": agg.recall, "f1": agg.f1, "count_error": agg.mean_count_error,
                     "tp": agg.tp, "fp": agg.fp, "fn": agg.fn, "images": agg.images})
        curves[label] = (ths, [t.precision for t in totals], [t.recall for t in totals],
                         [t.f1 for t in totals])
    write_csv(args.report, _COMPARE_HEADER, rows)
    svg = plotting.svg_path_for(args.report)
    plotting.pr_curves(svg, curves)
    plotting.comparison_bars(svg.with_name(svg.stem + "_bars.svg"), rows)
    width = max(len(r["model"]) for r in rows)
    print(f"{'model':<{width}}  {'arch':<8} {'params':>7} {'thr':>7} {'P':>6} {'R':>6} "
          f"{'F1':>6} {'|dN|':>6}")
    for r in rows:
        print(f"{r['model']:<{width}}  {r['arch']:<8} {r['params']:>7} "
              f"{r['best_threshold']:>7.4f} {r['precision']:>6.3f} {r['recall']:>6.3f} "
              f"{r['f1']:>6.3f} {r['count_error']:>6.3f}")


COMMANDS = {"gen": cmd_gen, "solve": cmd_solve, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "compare": cmd_compare}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        code = COMMANDS[args.command](args)
    except (SpotkitError, OSError, argparse.ArgumentTypeError) as exc:
        print(f"spotkit {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return int(code or 0)


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
