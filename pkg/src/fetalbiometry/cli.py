"""Command-line entry point.

Subcommands: ``gen`` (phantom dataset), ``train``, ``eval``, ``sweep``
(lambda ablation), ``fit`` (standalone geometric fitting), ``preprocess``
(annotation-recovery pipeline) and ``gradcheck``.

Exit codes: 0 success, 1 IO/runtime error, 2 usage error, 3 geometric-fit
failure.  An optional ``--config`` file supplies ``key = value`` defaults;
explicit command-line flags win, unknown keys are an error.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys

import numpy as np

from . import geometry as G
from . import synthdata
from .evaluation import (RECORD_COLUMNS, REPORT_COLUMNS, evaluate,
                         record_csv_row, report_csv_row)
from .network import (ORGAN_BY_NAME, OrganClass, UNetConfig, build_unet,
                      load_model, save_model)
from .pgm import read_pgm
from .training import TrainConfig, lambda_sweep, train

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_FIT = 3


class UsageError(Exception):
    pass


class FitFailure(Exception):
    pass


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fetalbiometry",
        description="Multi-task biometry on synthetic ultrasound phantoms.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", help="key = value file with flag defaults")

    p = sub.add_parser("gen", help="generate a phantom dataset")
    add_config(p)
    p.add_argument("--out", help="output directory")
    p.add_argument("--subjects", type=int)
    p.add_argument("--per-subject", dest="per_subject", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--annotate", action="store_true", default=None)

    p = sub.add_parser("train", help="train a model on a dataset's train split")
    add_config(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--decay", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--base", type=int)
    p.add_argument("--out", help="output model file")

    p = sub.add_parser("eval", help="evaluate a model on the test split")
    add_config(p)
    p.add_argument("--data")
    p.add_argument("--model")
    p.add_argument("--routing", choices=["predicted", "true"])
    p.add_argument("--records", help="per-sample records CSV output")

    p = sub.add_parser("sweep", help="train and evaluate across lambda values")
    add_config(p)
    p.add_argument("--data")
    p.add_argument("--lambdas", help="comma-separated lambda list")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--decay", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--base", type=int)
    p.add_argument("--out", help="report CSV output")

    p = sub.add_parser("fit", help="fit an ellipse or rectangle to a mask file")
    add_config(p)
    p.add_argument("--mask", help="PGM mask file")
    p.add_argument("--shape", choices=["ellipse", "rect"])
    p.add_argument("--spacing", type=float)

    p = sub.add_parser("preprocess", help="recover geometry from an annotation channel")
    add_config(p)
    p.add_argument("--annot", help="PGM annotation file")
    p.add_argument("--organ", choices=["brain", "abdomen", "femur"])

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    add_config(p)

    return parser


_DEFAULTS = {
    "gen": {"subjects": 50, "per_subject": 6, "size": 64, "seed": 0, "annotate": False},
    "train": {"lam": 0.001, "epochs": 30, "batch": 16, "lr": 5e-4, "decay": 0.97,
              "seed": 0, "depth": 3, "base": 8},
    "eval": {"routing": "predicted"},
    "sweep": {"epochs": 30, "batch": 16, "lr": 5e-4, "decay": 0.97, "seed": 0,
              "depth": 3, "base": 8},
    "fit": {"shape": "ellipse", "spacing": 0.5},
    "preprocess": {},
    "gradcheck": {},
}

_REQUIRED = {
    "gen": ["out"],
    "train": ["data", "out"],
    "eval": ["data", "model"],
    "sweep": ["data", "lambdas", "out"],
    "fit": ["mask"],
    "preprocess": ["annot", "organ"],
    "gradcheck": [],
}

_BOOL_KEYS = {"annotate"}


def _parse_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, _, val = line.partition("=")
            values[key.strip().replace("-", "_")] = val.strip()
    return values


def _merge_config(args: argparse.Namespace) -> argparse.Namespace:
    defaults = dict(_DEFAULTS[args.command])
    if args.config:
        file_vals = _parse_config_file(args.config)
        known = set(defaults) | set(_REQUIRED[args.command])
        for key, raw in file_vals.items():
            if key not in known:
                raise UsageError(f"unknown config key {key!r} for {args.command}")
            if key in _BOOL_KEYS:
                defaults[key] = raw.lower() in ("1", "true", "yes")
            elif key in defaults and defaults[key] is not None:
                defaults[key] = type(defaults[key])(raw)
            else:
                defaults[key] = raw
    for key in set(defaults) | set(_REQUIRED[args.command]):
        if getattr(args, key, None) is None:
            setattr(args, key, defaults.get(key))
    missing = [k for k in _REQUIRED[args.command] if getattr(args, k) is None]
    if missing:
        flags = ", ".join("--" + m.replace("_", "-") for m in missing)
        raise UsageError(f"missing required flag(s): {flags}")
    return args


def _write_csv(path: str, header: list[str], rows) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_gen(args) -> int:
    samples = synthdata.generate_dataset(args.out, args.subjects, args.per_subject,
                                         args.size, args.seed, annotate=args.annotate)
    counts = {name: 0 for name in ORGAN_BY_NAME}
    for s in samples:
        counts[s.stem.rsplit("_", 1)[1]] += 1
    print(f"wrote {len(samples)} samples to {args.out} "
          f"(brain={counts['brain']}, abdomen={counts['abdomen']}, "
          f"femur={counts['femur']})")
    return EXIT_OK


def _load_split(data_dir: str, split: str):
    samples = synthdata.load_dataset(os.path.join(data_dir, "manifest.csv"))
    subset = synthdata.split_of(samples, split)
    if not subset:
        raise ValueError(f"dataset {data_dir} has no '{split}' samples")
    return samples, subset


def _cmd_train(args) -> int:
    if not (0.0 <= args.lam <= 1.0):
        raise UsageError(f"--lambda must be in [0, 1], got {args.lam}")
    _, train_samples = _load_split(args.data, "train")
    size = train_samples[0].image.shape[0]
    model = build_unet(UNetConfig(depth=args.depth, base_channels=args.base,
                                  input_size=size), rng_seed=args.seed)
    cfg = TrainConfig(lam=args.lam, lr0=args.lr, decay_gamma=args.decay,
                      epochs=args.epochs, batch_size=args.batch, seed=args.seed)
    history = train(model, train_samples, cfg)
    print("epoch,lr,l_cls,l_seg,l_joint")
    for e, rep in enumerate(history):
        lr_e = cfg.lr0 * cfg.decay_gamma ** e
        print(f"{e},{lr_e:.8g},{rep.l_cls:.8g},{rep.l_seg:.8g},{rep.l_joint:.8g}")
    save_model(model, args.out)
    return EXIT_OK


def _cmd_eval(args) -> int:
    model = load_model(args.model)
    _, test_samples = _load_split(args.data, "test")
    records, row = evaluate(model, test_samples, routing=args.routing)
    if args.records:
        _write_csv(args.records, RECORD_COLUMNS, [record_csv_row(r) for r in records])
    row.lam = math.nan
    print(",".join(REPORT_COLUMNS))
    print(",".join(report_csv_row(row)))
    return EXIT_OK


def _cmd_sweep(args) -> int:
    try:
        lambdas = [float(v) for v in args.lambdas.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise UsageError(f"bad --lambdas list: {exc}") from exc
    if not lambdas:
        raise UsageError("--lambdas must list at least one value")
    if any(not (0.0 <= lam <= 1.0) for lam in lambdas):
        raise UsageError("every lambda must be in [0, 1]")
    _, train_samples = _load_split(args.data, "train")
    _, test_samples = _load_split(args.data, "test")
    size = train_samples[0].image.shape[0]
    model_config = UNetConfig(depth=args.depth, base_channels=args.base, input_size=size)
    cfg = TrainConfig(lam=lambdas[0], lr0=args.lr, decay_gamma=args.decay,
                      epochs=args.epochs, batch_size=args.batch, seed=args.seed)
    rows = lambda_sweep(train_samples, test_samples, lambdas, cfg, model_config,
                        model_seed=args.seed)
    _write_csv(args.out, REPORT_COLUMNS, [report_csv_row(r) for r in rows])
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def _cmd_fit(args) -> int:
    mask = read_pgm(args.mask) > 127
    comp = G.largest_component(mask)
    if not comp.any():
        raise FitFailure(f"{args.mask}: empty mask")
    if args.shape == "ellipse":
        try:
            ell = G.fit_filled_ellipse(comp)
        except G.FitError as exc:
            raise FitFailure(f"{args.mask}: {exc}") from exc
        circ_mm = G.ellipse_circumference(ell) * args.spacing
        print("cx,cy,a,b,theta,circumference_mm")
        print(f"{ell.cx:.6f},{ell.cy:.6f},{ell.a:.6f},{ell.b:.6f},"
              f"{ell.theta:.6f},{circ_mm:.6f}")
    else:
        try:
            rect = G.fit_min_rect(comp)
        except G.FitError as exc:
            raise FitFailure(f"{args.mask}: {exc}") from exc
        print("center_x,center_y,length,breadth,angle,length_mm")
        print(f"{rect.center[0]:.6f},{rect.center[1]:.6f},{rect.length:.6f},"
              f"{rect.breadth:.6f},{rect.angle:.6f},{rect.length * args.spacing:.6f}")
    return EXIT_OK


def _cmd_preprocess(args) -> int:
    annot = read_pgm(args.annot) > 127
    organ = ORGAN_BY_NAME[args.organ]
    if organ in (OrganClass.BRAIN, OrganClass.ABDOMEN):
        if not annot.any():
            raise FitFailure(f"{args.annot}: empty annotation")
        try:
            ell = G.recover_annotated_ellipse(annot)
        except G.FitError as exc:
            raise FitFailure(f"{args.annot}: {exc}") from exc
        print("cx,cy,a,b,theta")
        print(f"{ell.cx:.6f},{ell.cy:.6f},{ell.a:.6f},{ell.b:.6f},{ell.theta:.6f}")
    else:
        peaks = G.match_cross_patterns(annot.astype(np.float64), arm=3, top_k=2)
        if len(peaks) < 2:
            raise FitFailure(f"{args.annot}: fewer than two cross markers found")
        (p1, s1), (p2, s2) = peaks
        dist = G.femur_length_endpoints(p1, p2)
        print("x1,y1,x2,y2,length")
        print(f"{p1[0]},{p1[1]},{p2[0]},{p2[1]},{dist:.6f}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .tensor import run_gradient_suite
    results = run_gradient_suite()
    worst = max(results.values())
    for name in sorted(results):
        print(f"{name}: max_rel_err {results[name]:.3g}")
    composite = _composite_gradcheck()
    print(f"composite_joint_loss: max_rel_err {composite:.3g}")
    ok = worst <= 1e-4 and composite <= 1e-3
    print(f"max_rel_err <= {'1e-3' if ok else 'TOLERANCE EXCEEDED'}")
    return EXIT_OK if ok else EXIT_RUNTIME


def _composite_gradcheck(n_params: int = 20, seed: int = 0) -> float:
    """Finite-difference check of the joint loss through a tiny model."""
    from . import tensor as T
    from .training import LossWeights, compute_batch_loss
    from .tensor import Tensor

    rng = np.random.default_rng(seed)
    model = build_unet(UNetConfig(depth=2, base_channels=2, input_size=16), rng_seed=seed)
    images = Tensor(rng.random((2, 1, 16, 16)))
    masks = Tensor((rng.random((2, 1, 16, 16)) > 0.5).astype(np.float64))
    labels = [0, 1]
    weights = LossWeights(0.5)

    def loss_value() -> float:
        l_joint, _, _ = compute_batch_loss(model, images, masks, labels, weights)
        return l_joint.item()

    model.zero_grad()
    l_joint, _, _ = compute_batch_loss(model, images, masks, labels, weights)
    T.backward(l_joint)

    params = model.parameters()
    flat_index = [(p, i) for p in params for i in range(p.size)]
    picks = rng.choice(len(flat_index), size=min(n_params, len(flat_index)), replace=False)
    h = 1e-5
    worst = 0.0
    for k in picks:
        p, i = flat_index[int(k)]
        analytic = p.grad.reshape(-1)[i] if p.grad is not None else 0.0
        flat = p.data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        fp = loss_value()
        flat[i] = orig - h
        fm = loss_value()
        flat[i] = orig
        numeric = (fp - fm) / (2 * h)
        worst = max(worst, abs(analytic - numeric) / max(1.0, abs(analytic)))
    return worst


_RUNNERS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "fit": _cmd_fit,
    "preprocess": _cmd_preprocess,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args = _merge_config(args)
        return _RUNNERS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"usage: see 'fetalbiometry {args.command} --help'", file=sys.stderr)
        return EXIT_USAGE
    except FitFailure as exc:
        print(f"fit error: {exc}", file=sys.stderr)
        return EXIT_FIT
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
