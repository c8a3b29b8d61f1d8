"""Command-line interface.

Every subcommand accepts ``--config FILE`` (a pipeline JSON document); flags
given on the command line override the matching config keys. Failures exit
with status 1 and a message tagged with the failing stage.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, PipelineConfig
from .crf.meanfield import CrfParameters
from .evaluation import score_report, write_report
from .fcnn.network import FCNN
from .fusion import fuse_volumes
from .phantom import PhantomConfig, generate_phantom
from .pipeline import (
    LABELS_SUFFIX,
    VOLUME_SUFFIX,
    StageError,
    finetune,
    load_cases,
    normalize_cases,
    run_segment,
    run_train,
    slices_for,
    stage,
    train_crf,
    train_fcnn,
    write_trace,
)
from .postprocess import ALL_STEPS, postprocess
from .preprocess import normalize_volume
from .volume import AXES, load_labels, load_volume, save_labels, save_volume

log = logging.getLogger("tumorseg")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _pair(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected NAME=VALUE, got {text!r}")
    name, value = text.split("=", 1)
    return name.strip(), value.strip()


def _config(args, **overrides) -> PipelineConfig:
    config = PipelineConfig.load(args.config) if args.config else PipelineConfig().validate()
    given = {k: v for k, v in overrides.items() if v is not None}
    return config.updated(**given) if given else config


def _trace_path(model_path) -> Path:
    return Path(str(model_path) + ".loss.json")


# ---------------------------------------------------------------------------
# subcommands


def cmd_phantom(args) -> None:
    phantom = PhantomConfig(noise=args.noise, enable_shell=not args.no_shell)
    if args.dims:
        phantom.dims = tuple(int(d) for d in _floats(args.dims))
    if args.no_csf:
        phantom.csf_extent = None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for seed in range(args.seed, args.seed + args.count):
        with stage("phantom"):
            volume, labels = generate_phantom(seed, phantom)
            save_volume(volume, out / f"phantom_{seed:04d}{VOLUME_SUFFIX}")
            save_labels(labels, out / f"phantom_{seed:04d}{LABELS_SUFFIX}")


def cmd_preprocess(args) -> None:
    config = _config(args)
    targets = config.normalization_targets()
    with stage("preprocess"):
        volume = load_volume(args.input)
        names = list(volume.channel_names)
        for flag, slot in ((args.sigma, 0), (args.offset, 1)):
            if flag is None:
                continue
            if len(flag) != len(names):
                raise ValueError(f"expected {len(names)} values for channels {names}, got {len(flag)}")
            for name, value in zip(names, flag):
                current = list(targets.get(name, (None, None)))
                current[slot] = value
                targets[name] = tuple(current)
        save_volume(normalize_volume(volume, targets), args.out)


def _training_data(args, config):
    with stage("load-data"):
        cases = load_cases(args.data)
    if args.normalized:
        return cases
    with stage("preprocess"):
        return normalize_cases(config, cases)


def cmd_train_fcnn(args) -> None:
    config = _config(args, **{
        "fcnn.n": args.n, "fcnn.width": args.width, "fcnn.per_class": args.per_class,
        "fcnn.epochs": args.epochs, "fcnn.base_lr": args.lr, "fcnn.batch_size": args.batch_size,
        "fcnn.input_scale": args.input_scale, "fcnn.input_shift": args.input_shift,
        "seed": args.seed,
    })
    cases = _training_data(args, config)
    with stage("train-fcnn"):
        net, trace = train_fcnn(config, cases, args.axis)
        net.save(args.out)
        write_trace(_trace_path(args.out), "step1", trace)


def _crf_overrides(args) -> dict:
    return {"crf.iterations": args.iterations, "crf.slices_per_volume": args.per_volume,
            "seed": args.seed}


def cmd_train_crf(args) -> None:
    config = _config(args, **_crf_overrides(args), **{
        "crf.step2_rate": args.rate, "crf.step2_epochs": args.epochs})
    cases = _training_data(args, config)
    with stage("train-crf"):
        net = FCNN.load(args.fcnn)
        params, trace = train_crf(config, net, slices_for(config, cases, args.axis))
        params.save(args.out)
        write_trace(_trace_path(args.out), "step2", trace)


def cmd_finetune(args) -> None:
    config = _config(args, **_crf_overrides(args), **{
        "crf.step3_rate": args.rate, "crf.step3_epochs": args.epochs})
    cases = _training_data(args, config)
    with stage("finetune"):
        net, params = FCNN.load(args.fcnn), CrfParameters.load(args.crf)
        net, params, trace = finetune(config, net, params, slices_for(config, cases, args.axis))
        out_fcnn = args.out_fcnn or args.fcnn
        out_crf = args.out_crf or args.crf
        net.save(out_fcnn)
        params.save(out_crf)
        write_trace(_trace_path(out_crf), "step3", trace)


def _steps(skip) -> list[int]:
    skip = set(skip or [])
    return [s for s in ALL_STEPS if s not in skip]


def cmd_segment(args) -> None:
    overrides = {"input": args.input, "output": args.out, "dump_dir": args.dump,
                 "model_dir": args.model_dir, "views": args.views}
    if args.skip_step or args.no_postprocess:
        overrides["postprocess.steps"] = [] if args.no_postprocess else _steps(args.skip_step)
    if args.model:
        models = {}
        for view, paths in args.model:
            fcnn, _, crf = paths.partition(",")
            models[view] = {"fcnn": fcnn, "crf": crf or None}
        overrides["models"] = models
    config = _config(args, **overrides)
    run_segment(config)


def cmd_fuse(args) -> None:
    with stage("fuse"):
        fused = fuse_volumes(load_labels(args.axial), load_labels(args.coronal),
                             load_labels(args.sagittal))
        save_labels(fused, args.out)


def cmd_postprocess(args) -> None:
    thresholds = {}
    for name, value in args.theta or []:
        key = name if name.startswith("theta") else "theta" + name.lstrip("θ")
        thresholds[key] = float(value)
    config = _config(args, **({"postprocess.thresholds": thresholds} if thresholds else {}))
    with stage("postprocess"):
        labels, volume = load_labels(args.labels), load_volume(args.volume)
        if args.normalize:
            volume = normalize_volume(volume, config.normalization_targets())
        steps = [s for s in config.postprocess.steps if s not in set(args.skip_step or [])]
        save_labels(postprocess(labels, volume, config.thresholds(), steps), args.out)


def cmd_evaluate(args) -> None:
    with stage("evaluate"):
        report = score_report(load_labels(args.pred), load_labels(args.truth))
        if args.out:
            write_report(report, args.out)
        for region, entry in report.items():
            print(f"{region:9s} dice {entry.dice:.4f} ppv {entry.ppv:.4f} "
                  f"sensitivity {entry.sensitivity:.4f}")


def cmd_train(args) -> None:
    overrides = {"data_dir": args.data, "model_dir": args.model_dir, "views": args.views,
                 "train_steps": args.steps, "seed": args.seed}
    run_train(_config(args, **overrides))


def cmd_benchmark(args) -> None:
    from .benchmark import BenchmarkSettings, benchmark_config, run_benchmark, summary_lines

    config = PipelineConfig.load(args.config) if args.config else benchmark_config(args.seed)
    settings = BenchmarkSettings(train_cases=args.train_cases, test_cases=args.test_cases,
                                 seed=args.seed)
    with stage("benchmark"):
        result = run_benchmark(args.out, settings, config)
    print("\n".join(summary_lines(result)))


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tumorseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="pipeline JSON document")
        p.set_defaults(func=func)
        return p

    p = add("phantom", cmd_phantom, "write synthetic phantom cases")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--dims", help="Z,Y,X")
    p.add_argument("--noise", type=float, default=PhantomConfig.noise)
    p.add_argument("--no-shell", action="store_true", help="omit the non-enhancing shell")
    p.add_argument("--no-csf", action="store_true", help="omit the central ventricle")

    p = add("preprocess", cmd_preprocess, "normalize a multi-modal volume")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=_floats, help="one target deviation per channel")
    p.add_argument("--offset", type=_floats, help="one target mode per channel")

    def training(p):
        p.add_argument("--axis", choices=AXES, default="axial")
        p.add_argument("--seed", type=int)
        p.add_argument("--normalized", action="store_true",
                       help="volumes in the data directory are already pre-processed")

    p = add("train-fcnn", cmd_train_fcnn, "step 1: patch training of the FCNN")
    p.add_argument("--data", required=True, help="directory of NAME_volume.mmv / NAME_labels.mmv")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--per-class", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--input-scale", type=float)
    p.add_argument("--input-shift", type=float)
    training(p)

    for name, func, help_ in (("train-crf", cmd_train_crf, "step 2: CRF training, FCNN frozen"),
                              ("finetune", cmd_finetune, "step 3: joint fine-tuning")):
        p = add(name, func, help_)
        p.add_argument("--fcnn", required=True)
        p.add_argument("--slices", dest="data", required=True,
                       help="directory of NAME_volume.mmv / NAME_labels.mmv")
        p.add_argument("--rate", type=float)
        p.add_argument("--epochs", type=int)
        p.add_argument("--iterations", "-T", type=int)
        p.add_argument("--per-volume", type=int, help="tumour slices used per volume")
        training(p)
    sub.choices["train-crf"].add_argument("--out", required=True)
    p.add_argument("--crf", required=True)
    p.add_argument("--out-fcnn", help="default: overwrite --fcnn")
    p.add_argument("--out-crf", help="default: overwrite --crf")

    p = add("segment", cmd_segment, "segment a raw volume")
    p.add_argument("--volume", dest="input")
    p.add_argument("--out")
    p.add_argument("--model", type=_pair, action="append", metavar="VIEW=FCNN[,CRF]")
    p.add_argument("--model-dir", help="directory holding VIEW.fcnn / VIEW.crf")
    p.add_argument("--views", nargs="+", choices=AXES)
    p.add_argument("--skip-step", type=int, action="append", choices=ALL_STEPS)
    p.add_argument("--no-postprocess", action="store_true")
    p.add_argument("--dump", help="write per-view and fused label volumes here")

    p = add("fuse", cmd_fuse, "majority-vote three view results")
    for view in AXES:
        p.add_argument(f"--{view}", required=True)
    p.add_argument("--out", required=True)

    p = add("postprocess", cmd_postprocess, "rule-based cleanup of a label volume")
    p.add_argument("--labels", required=True)
    p.add_argument("--volume", required=True, help="pre-processed volume")
    p.add_argument("--out", required=True)
    p.add_argument("--skip-step", type=int, action="append", choices=ALL_STEPS)
    p.add_argument("--theta", type=_pair, action="append", metavar="NAME=VALUE")
    p.add_argument("--normalize", action="store_true", help="normalize --volume first")

    p = add("evaluate", cmd_evaluate, "Dice / PPV / sensitivity per region")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", help="report JSON")

    p = add("train", cmd_train, "all training steps for every configured view")
    p.add_argument("--data")
    p.add_argument("--model-dir")
    p.add_argument("--views", nargs="+", choices=AXES)
    p.add_argument("--steps", type=int, nargs="+", choices=(1, 2, 3))
    p.add_argument("--seed", type=int)

    p = add("benchmark", cmd_benchmark, "phantom end-to-end experiment")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-cases", type=int, default=20)
    p.add_argument("--test-cases", type=int, default=10)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: [{args.command}] {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
