"""``cocokit`` command line.

Exit codes: 0 success, 1 failed check, 2 I/O or configuration error,
3 numerical divergence.  Every command echoes its resolved settings to
stderr as one JSON line.  ``COCOKIT_THREADS`` caps BLAS threads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from cocokit import experiments, gradcheck, trainer
from cocokit.crc import Dictionary
from cocokit.data_eval import (
    DatasetError,
    aggregate,
    binomial_sign_test,
    bonferroni,
    evaluate,
    load_dataset,
    save_dataset,
    synth_finegrained,
)
from cocokit.errors import DivergenceError

EXIT_OK, EXIT_CHECK, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3
GRAD_TOL = 1e-5
MODE_ALIASES = {"softmax": "softmax_baseline"}


class UsageError(Exception):
    """Bad flag values or config; maps to exit code 2."""


def _echo(command: str, settings: dict) -> None:
    print(json.dumps({"command": command, **settings}, sort_keys=True, default=str), file=sys.stderr)


def _write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# -- config resolution ----------------------------------------------------------

def _add_train_flags(p: argparse.ArgumentParser, mode: bool = True) -> None:
    if mode:
        p.add_argument("--mode", choices=list(trainer.MODES) + list(MODE_ALIASES))
    p.add_argument("--config", help="key=value manifest; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, dest="max_epochs", help="fine-tuning epochs")
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--lam", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--enable-grad-y", action=argparse.BooleanOptionalAction, default=None,
                   dest="enable_grad_Y", help="back-propagate through p2 features too (desk default: on)")
    p.add_argument("--diag-weights", action=argparse.BooleanOptionalAction, default=None)


def resolve_config(args) -> trainer.TrainConfig:
    """Desk defaults, then the manifest, then explicit flags."""
    values = trainer.TrainConfig.desk().to_dict()
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc.strerror}") from None
        try:
            values = trainer.parse_manifest(text, values)
        except ValueError as exc:
            raise UsageError(f"{args.config}: {exc}") from None
    for key in ("seed", "max_epochs", "pretrain_epochs", "image_size", "lam", "gamma",
                "enable_grad_Y", "diag_weights"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    mode = getattr(args, "mode", None)
    if mode:
        values["mode"] = MODE_ALIASES.get(mode, mode)
    try:
        return trainer.TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _load_images(path, cfg: trainer.TrainConfig | None = None):
    data = load_dataset(path, resize_to=cfg.image_size if cfg else None)
    if isinstance(data, Dictionary):
        raise UsageError(f"{path} is a feature CSV; this command needs an image manifest")
    return data


# -- commands -------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    settings = dict(classes=args.classes, per_class=args.per_class, image_size=args.size,
                    glyph_contrast=args.contrast, long_tail=args.long_tail, seed=args.seed)
    _echo("gen-data", {**settings, "out": args.out})
    try:
        ds = synth_finegrained(**settings)
    except DatasetError as exc:
        raise UsageError(str(exc)) from None
    manifest = save_dataset(ds, args.out)
    print(f"{'class':<12} {'samples':>7}")
    for name, n in zip(ds.class_names, ds.class_sizes()):
        print(f"{name:<12} {n:>7d}")
    print(f"wrote {len(ds)} images to {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    _echo("train", {**cfg.to_dict(), "data": args.data, "out": args.out})
    ds = _load_images(args.data, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    loss_path = out / "loss.csv"
    if loss_path.exists():
        loss_path.unlink()
    model = trainer.train(cfg, ds)
    trainer.write_loss_log(loss_path, model.history)
    model.save(out / "model.ckpt")
    _write(out / "config.txt", cfg.to_manifest())
    acc = evaluate(model, ds.images, ds.labels)
    print(f"mode {cfg.mode}: training accuracy {acc:.1f}%")
    print(f"wrote {out / 'model.ckpt'} and {loss_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _echo("eval", {"model": args.model, "data": args.data})
    model = trainer.TrainedModel.load(args.model)
    ds = _load_images(args.data).resized(model.config.get("image_size"))
    acc = evaluate(model, ds.images, ds.labels)
    report = aggregate([acc], model.config, experiments.MODE_LABELS[model.mode])
    if args.out:
        _write(args.out, report.to_json() + "\n")
    print(f"{report.label}: {acc:.2f}% on {len(ds)} images")
    return EXIT_OK


def _run_compare(args, modes, command: str) -> int:
    cfg = resolve_config(args)
    _echo(command, {**cfg.to_dict(), "data": args.data, "k": args.k, "modes": modes})
    ds = _load_images(args.data, cfg)
    reports = experiments.compare(cfg, ds, modes, k=args.k)
    if command == "compare":
        reports = dict(sorted(reports.items(), key=lambda kv: -kv[1].mean))
    print(experiments.format_table(reports))
    doc = {m: json.loads(r.to_json()) for m, r in reports.items()}
    text = json.dumps(doc if command == "compare" else doc[modes[0]], sort_keys=True, indent=2)
    if args.out:
        _write(args.out, text + "\n")
    else:
        print(text)
    return EXIT_OK


def cmd_crossval(args) -> int:
    mode = MODE_ALIASES.get(args.mode, args.mode) if args.mode else None
    modes = [mode or resolve_config(args).mode]
    return _run_compare(args, modes, "crossval")


def cmd_compare(args) -> int:
    modes = [MODE_ALIASES.get(m.strip(), m.strip()) for m in args.modes.split(",") if m.strip()]
    bad = [m for m in modes if m not in trainer.MODES]
    if bad or not modes:
        raise UsageError(f"unknown mode(s): {', '.join(bad) or '(none)'}")
    return _run_compare(args, modes, "compare")


def _parse_sizes(text: str):
    try:
        sizes = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"--sizes expects d,m,n integers, got {text!r}") from None
    if len(sizes) != 3 or min(sizes) < 1:
        raise UsageError(f"--sizes expects three positive integers, got {text!r}")
    return sizes


def cmd_gradcheck(args) -> int:
    sizes = _parse_sizes(args.sizes)
    _echo("gradcheck", {"seed": args.seed, "sizes": sizes, "corrupt": args.corrupt})
    errors = {}
    for diag in (False, True):
        corrupt = args.corrupt if args.corrupt != "featnet" else None
        res = gradcheck.collab_gradcheck(args.seed, sizes, diag, corrupt)
        for k, v in res.items():
            errors[k] = max(errors.get(k, 0.0), v)
    errors["featnet"] = gradcheck.featnet_gradcheck(args.seed, corrupt=args.corrupt == "featnet")
    failed = []
    for name, err in errors.items():
        ok = err <= GRAD_TOL
        print(f"{'PASS' if ok else 'FAIL'} {name:<8} max rel err {err:.3e}")
        if not ok:
            failed.append(name)
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_sigtest(args) -> int:
    _echo("sigtest", {"wins": args.wins, "trials": args.trials, "alpha": args.alpha,
                      "comparisons": args.comparisons})
    try:
        p = binomial_sign_test(args.wins, args.trials, 0.5)
        adj = bonferroni(args.alpha, args.comparisons)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    verdict = "significant" if p < adj else "not significant"
    print(f"one-tail p = {p:.4g} ({args.wins}/{args.trials} wins)")
    print(f"Bonferroni-adjusted alpha = {adj:.4g} ({args.alpha:g} / {args.comparisons})")
    print(verdict)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cocokit", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-fold progress")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic fine-grained image set")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--contrast", type=float, default=0.6)
    p.add_argument("--long-tail", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model and write a checkpoint plus loss CSV")
    _add_train_flags(p)
    p.add_argument("--data", required=True, help="image manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="write the report JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crossval", help="stratified k-fold accuracy for one mode")
    _add_train_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out", help="write the report JSON here instead of stdout")
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("compare", help="k-fold accuracy for several modes on shared folds")
    _add_train_flags(p, mode=False)
    p.add_argument("--data", required=True)
    p.add_argument("--modes", default="softmax,cascade_crc,cascade_procrc,coconet")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out", help="write the report JSON here instead of stdout")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gradcheck", help="finite-difference check of every analytic gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sizes", default="5,7,6", help="d,m,n of the collaborative instance")
    p.add_argument("--corrupt", choices=list(gradcheck.COLLAB_GRADS) + ["featnet"],
                   help="perturb one analytic gradient (negative control)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sigtest", help="one-tailed sign test with a Bonferroni threshold")
    p.add_argument("--wins", type=int, required=True)
    p.add_argument("--trials", type=int, required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--comparisons", type=int, default=9)
    p.set_defaults(func=cmd_sigtest)
    return ap


def _thread_limit():
    raw = os.environ.get("COCOKIT_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"COCOKIT_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("COCOKIT_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, DatasetError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc.filename or ''}: {exc.strerror}", file=sys.stderr)
        return EXIT_IO


def run() -> None:
    sys.exit(main())
