"""Command line interface.

Subcommands: ``synthesize``, ``fit-basis``, ``covariance-cache``,
``metrics``, ``plot`` and ``classify``.  Exit codes: 0 success, 2 invalid
configuration or arguments, 3 I/O failure, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

log = logging.getLogger("turbsyn")


def _cmd_synthesize(args) -> int:
    from .pipeline import JobConfig, synthesize

    if args.config is None:
        raise _Usage("synthesize needs --config")
    overrides = {"master_seed": args.seed, "output": args.out, "workers": args.workers,
                 "modality": args.modality, "frames": args.frames, "noise_sigma": args.noise_sigma}
    if args.overwrite:
        overrides["overwrite"] = True
    config = JobConfig.load(args.config, **overrides)
    if args.out is not None:
        # a command-line output path is relative to the working directory
        config = JobConfig.from_dict({**config.to_dict(), "output": str(Path(args.out).resolve())},
                                     config.base_dir)
    start = time.perf_counter()
    manifest = synthesize(config)
    for seq in manifest["sequences"]:
        print(f"{seq['sequence']}\t{seq['strength']}\td_bar={seq['mean_d_bar']:.3f}\t"
              f"blur={seq['mean_blur_score']:.3f}")
    log.info("synthesized %d sequences in %.1f s", len(manifest["sequences"]),
             time.perf_counter() - start)
    return EXIT_OK


def _cmd_fit_basis(args) -> int:
    from .psf import build_dictionary, fit_basis, holdout_errors, save_basis

    if args.out is None:
        raise _Usage("fit-basis needs --out")
    rng = np.random.default_rng(args.seed)
    dictionary = build_dictionary(args.dictionary + args.holdout, rng=rng)
    train, held = dictionary.split(args.holdout)
    basis = fit_basis(train, args.rank)
    save_basis(basis, args.out)
    errors = holdout_errors(basis, held)
    print(json.dumps({"path": str(args.out), "rank": basis.rank, "side": basis.side,
                      "explained_energy": basis.explained_energy,
                      "holdout_median_error": float(np.median(errors)),
                      "digest": basis.digest}, indent=2))
    return EXIT_OK


def _cmd_covariance_cache(args) -> int:
    from .covariance import BesselTableStore, build_covariance_field, unique_triples

    store = BesselTableStore(cache_dir=args.out, use_shipped=not args.rebuild)
    for orders in unique_triples():
        store.table(*orders)
    print(f"tables ready: {len(unique_triples())} in {store.cache_dir / 'bessel'}")
    if args.config is not None:
        from .pipeline import JobConfig, draw_params, list_frames, read_frame

        config = JobConfig.load(args.config, master_seed=args.seed, modality=args.modality)
        for rel in config.inputs:
            shape = read_frame(list_frames(config.resolve(rel))[0]).shape
            params = draw_params(config, rel, shape, 0)
            build_covariance_field(params.geometry(), params.profile(), config.pad, store=store,
                                   cache_dir=store.cache_dir)
            print(f"field ready: {rel}")
    return EXIT_OK


def _cmd_metrics(args) -> int:
    from .metrics import evaluate, metric_settings
    from .pipeline import list_frames, read_frame

    if args.samples is not None:
        return _metric_study(args)
    if args.reference is None or args.degraded is None:
        raise _Usage("metrics needs --reference and --degraded (or --config with --samples)")
    refs = list_frames(args.reference)
    degs = list_frames(args.degraded)
    if len(refs) == 1 and len(degs) > 1:
        refs = refs * len(degs)
    if len(refs) != len(degs):
        raise _Usage(f"{len(refs)} reference frames but {len(degs)} degraded frames")
    records = []
    for r, d in zip(refs, degs):
        report = evaluate(read_frame(r).data, read_frame(d).data)
        records.append({"reference": r.name, "degraded": d.name, **report.values()})
    _emit(records, args.out)
    if args.out is not None:
        Path(str(args.out) + ".settings.json").write_text(json.dumps(metric_settings(), indent=2))
    return EXIT_OK


def _metric_study(args) -> int:
    from .metrics import sensitivity_study
    from .pipeline import JobConfig, StudySimulator, draw_params, list_frames, read_frame

    if args.config is None:
        raise _Usage("a metric study needs --config")
    config = JobConfig.load(args.config, master_seed=args.seed, modality=args.modality,
                            noise_sigma=args.noise_sigma)
    corpus = [read_frame(list_frames(config.resolve(rel))[0]).data for rel in config.inputs]
    shapes = {c.shape[:2] for c in corpus}
    if len(shapes) != 1:
        raise _Usage("study inputs must share one frame size")
    params = draw_params(config, config.inputs[0], shapes.pop(), 0)
    lo, hi = args.cn2_range
    sim = StudySimulator(params, (lo * 1e-14, hi * 1e-14), config.master_seed,
                         noise_sigma=config.noise_sigma, block=config.block)
    records = sensitivity_study(corpus, sim, args.samples, np.random.default_rng(config.master_seed))
    _emit(records, args.out)
    return EXIT_OK


def _emit(records, out) -> None:
    from .metrics import write_report

    if out is None:
        for r in records:
            print(json.dumps(r, sort_keys=True))
    else:
        write_report(records, out)
        print(f"wrote {len(records)} records to {out}")


def _cmd_plot(args) -> int:
    from .metrics import read_report
    from .plotting import plot_metrics

    if args.report is None:
        raise _Usage("plot needs --report")
    records = read_report(args.report)
    paths = plot_metrics(records, args.out or Path(args.report).parent)
    for p in paths:
        print(p)
    return EXIT_OK


def _cmd_classify(args) -> int:
    from .params import classify_strength

    if args.config is not None:
        from .pipeline import JobConfig, classify_and_balance, list_frames, read_frame

        config = JobConfig.load(args.config, master_seed=args.seed, modality=args.modality)
        shapes = {rel: read_frame(list_frames(config.resolve(rel))[0]).shape for rel in config.inputs}
        entries = classify_and_balance(config, shapes)
        print(json.dumps([e.to_dict() for e in entries], indent=2, sort_keys=True))
        return EXIT_OK
    if None in (args.kernel_size, args.d_over_r0, args.d_bar):
        raise _Usage("classify needs K_B D_OVER_R0 D_BAR or --config")
    print(classify_strength(args.kernel_size, args.d_over_r0, args.d_bar))
    return EXIT_OK


class _Usage(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON job configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output path")
    common.add_argument("--workers", type=int, help="parallel sequences")
    common.add_argument("--modality", choices=("dynamic", "static"))
    common.add_argument("--frames", type=int, help="frames per sequence")
    common.add_argument("--noise-sigma", type=float, help="additive noise standard deviation")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="turbsyn", description="Turbulence degradation synthesis")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", parents=[common], help="degrade clean sequences")
    p.add_argument("--overwrite", action="store_true", help="replace existing sequence directories")
    p.set_defaults(func=_cmd_synthesize)

    p = sub.add_parser("fit-basis", parents=[common], help="fit a low-rank PSF basis")
    p.add_argument("--dictionary", type=int, default=20_000, help="training PSFs")
    p.add_argument("--holdout", type=int, default=1000, help="held-out PSFs for the error report")
    p.add_argument("--rank", type=int, default=100)
    p.set_defaults(func=_cmd_fit_basis)

    p = sub.add_parser("covariance-cache", parents=[common],
                       help="tabulate Bessel integrals and optional covariance fields")
    p.add_argument("--rebuild", action="store_true", help="ignore tables shipped with the package")
    p.set_defaults(func=_cmd_covariance_cache)

    p = sub.add_parser("metrics", parents=[common], help="image quality metrics or a metric study")
    p.add_argument("--reference", help="clean frame or directory")
    p.add_argument("--degraded", help="degraded frame or directory")
    p.add_argument("--samples", type=int, help="run a sensitivity study with this many samples")
    p.add_argument("--cn2-range", type=float, nargs=2, default=(1.0, 60.0), metavar=("LO", "HI"),
                   help="study Cn2 range in units of 1e-14 m^-2/3")
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("plot", parents=[common], help="plot a metric report")
    p.add_argument("--report", help="JSON-lines report")
    p.set_defaults(func=_cmd_plot)

    p = sub.add_parser("classify", parents=[common], help="strength label or balanced manifest")
    p.add_argument("kernel_size", nargs="?", type=int)
    p.add_argument("d_over_r0", nargs="?", type=float)
    p.add_argument("d_bar", nargs="?", type=float)
    p.set_defaults(func=_cmd_classify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    from .covariance import QuadratureError
    from .params import QuotaExhausted
    from .pipeline import ConfigError

    try:
        return args.func(args)
    except (ConfigError, _Usage, QuotaExhausted) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (QuadratureError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
