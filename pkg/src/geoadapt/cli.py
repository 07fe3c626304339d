"""Command-line interface.

Exit codes: 0 success, 1 validation error, 2 runtime or training error,
3 incompatible artifact.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline, plots
from .config import ExperimentConfig
from .errors import ArtifactIncompatibleError, GeoAdaptError, ValidationError

log = logging.getLogger("geoadapt")


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config (JSON); defaults otherwise")
    common.add_argument("--seed", type=int, help="global seed, overrides the config")
    common.add_argument("--out", type=Path, help="run directory, overrides the config")
    common.add_argument("--quiet", action="store_true", help="only print warnings and errors")

    p = argparse.ArgumentParser(prog="geoadapt", description="Few-shot latent-sampler adaptation on a frozen generator.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("invert", parents=[common], help="stage 1: build and invert the target set")
    sub.add_parser("train", parents=[common], help="stage 2: train the latent sampler")
    sp = sub.add_parser("sample", parents=[common], help="stage 3a: sample latents and decode them")
    sp.add_argument("-n", type=int, help="number of samples (default from config)")
    sub.add_parser("evaluate", parents=[common], help="stage 3b: desk metrics against the held-out split")
    for name, flag, default, what in (("ablate-losses", None, None, "loss-term ladder"),
                                      ("ablate-ntarget", "--sizes", "256,64,16", "target-set sizes"),
                                      ("ablate-k", "--ks", "3,5,10", "tangent dimensionalities")):
        a = sub.add_parser(name, parents=[common], help=f"ablation over {what}")
        a.add_argument("--seeds", type=_ints, help="comma-separated seeds (default: --seed)")
        if flag:
            a.add_argument(flag, type=_ints, default=_ints(default), help=f"comma-separated {what}")
    pl = sub.add_parser("plot", parents=[common], help="write plots (PNG + TSV data) for a run directory")
    pl.add_argument("--what", choices=("all", "loss", "ablations", "latents"), default="all")
    sub.add_parser("report", parents=[common], help="print a summary of a run directory")
    return p


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = str(args.out)
    return cfg.replace(**changes) if changes else cfg


def _run(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out)
    cmd = args.command
    if cmd == "invert":
        res = pipeline.run_stage1(cfg, out)
        print(f"inverted {len(res.latents)} images, median MSE {res.reconstruction['median_mse']:.3g} -> {out}")
    elif cmd == "train":
        res = pipeline.run_stage2(cfg, out)
        last = res.epoch_means[-1] if res.epoch_means else {}
        print(f"trained {len(res.epoch_means)} epochs, final total {last.get('total', float('nan')):.4g} -> {out}")
    elif cmd == "sample":
        z, _ = pipeline.sample_stage(cfg, out, n=args.n)
        print(f"sampled {len(z)} latents -> {out / pipeline.FILES['samples']}")
    elif cmd == "evaluate":
        print(pipeline.evaluate_stage(cfg, out).to_text(), end="")
    elif cmd == "ablate-losses":
        _print_table(pipeline.run_ablation_losses(cfg, args.seeds, out))
    elif cmd == "ablate-ntarget":
        _print_table(pipeline.run_ablation_ntarget(cfg, args.sizes, args.seeds, out))
    elif cmd == "ablate-k":
        _print_table(pipeline.run_ablation_k(cfg, args.ks, args.seeds, out))
    elif cmd == "plot":
        written = plots.plot_run(out, args.what)
        if not written:
            raise ValidationError(f"nothing to plot in {out}")
        for path in written:
            print(path)
    elif cmd == "report":
        print(pipeline.summarize_run(out))
    return 0


def _print_table(table):
    print(f"{table.parameter}\tmedian_fid\tmedian_precision\tmedian_recall\tmedian_density\tmedian_coverage")
    for label in table.labels():
        vals = [table.median(label, m) for m in ("fid", "precision", "recall", "density", "coverage")]
        print(label + "\t" + "\t".join(f"{v:.4g}" for v in vals))


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        return _run(args)
    except ArtifactIncompatibleError as e:
        log.error("incompatible artifact: %s", e)
        return 3
    except GeoAdaptError as e:
        log.error("%s", e)
        return e.exit_code
    except (FileNotFoundError, KeyError) as e:
        log.error("missing artifact: %s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
