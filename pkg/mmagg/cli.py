"""Command-line entry point: one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import datastore, evaluation, introspect, preprocess, synthgen, trainer
from .config import RunConfig, check_against_model, load_run_config, resolve_modalities
from .const import (
    CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
    DOMAIN,
    FEATURE_MAGIC,
    GRADCHECK_CLUSTERS,
    GRADCHECK_MODEL,
    GRADCHECK_STEP,
    GRADCHECK_TOLERANCE,
    SPLIT_VAL,
    VERSION,
)
from .datastore import ModalitySpec
from .exceptions import ConfigError, MMAggError, PreprocessError
from .model import init_model, load_model, save_model
from .sampling import predict_videos

_LOGGER = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _key_value(text: str) -> tuple:
    """Split ``name=value`` for argparse."""
    name, sep, value = text.partition("=")
    if not sep or not name:
        raise argparse.ArgumentTypeError(f"expected name=value, got {text!r}")
    return name, value


def _mapping(pairs: Optional[Sequence[tuple]], cast=str) -> Dict[str, object]:
    """Cast ``name=value`` pairs into a dict, wrapping bad values in ConfigError."""
    result = {}
    for name, value in pairs or ():
        try:
            result[name] = cast(value)
        except ValueError as err:
            raise ConfigError(f"Bad value for {name!r}: {value!r}") from err
    return result


def _config(args: argparse.Namespace, defaults: Optional[Dict[str, object]] = None, **overrides) -> RunConfig:
    """Run config from ``--config`` (or ``defaults``) with the command-line overrides applied."""
    config = load_run_config(getattr(args, "config", None), defaults)
    threads = getattr(args, "threads", None)
    return config.with_overrides(threads=threads, **overrides)


def _manifest_path(args: argparse.Namespace, config: RunConfig) -> str:
    """Manifest from ``--manifest``, else from the config."""
    path = getattr(args, "manifest", None) or config.manifest
    if path is None:
        raise ConfigError("No manifest given (use --manifest or the config's 'manifest' key)")
    return path


def _executor(threads: int) -> Optional[ThreadPoolExecutor]:
    """Thread pool for ``threads`` > 1, else None."""
    return ThreadPoolExecutor(max_workers=threads) if threads > 1 else None


def cmd_fit_preprocess(args: argparse.Namespace) -> int:
    """Fit one PCA/whitening model per ``--dim`` modality and save each as MMCK."""
    config = _config(args, seed=args.seed, pca_max_frames=args.max_frames)
    dataset = datastore.load_dataset(_manifest_path(args, config))
    dims = _mapping(args.dim, int)
    if not dims:
        raise ConfigError("fit-preprocess needs at least one --dim name=d")
    models = datastore.fit_preprocess(
        dataset,
        dims,
        max_frames=config.pca_max_frames,
        seed=config.seed,
        whiten_eps=config.whiten_eps,
        clip_bound=config.clip_bound,
    )
    out_dir = Path(args.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise PreprocessError(f"Cannot create {out_dir}: {err}") from err
    for name, model in models.items():
        path = out_dir / f"{name}.pca.mmck"
        digest = preprocess.save_preprocess_model(model, path)
        print(f"preprocess {name} {path} sha256 {digest}")
    return EXIT_OK


def cmd_apply_preprocess(args: argparse.Namespace) -> int:
    """Transform every feature file with the given models and write a new manifest."""
    config = _config(args)
    dataset = datastore.load_dataset(_manifest_path(args, config))
    paths = _mapping(args.model)
    if not paths:
        raise ConfigError("apply-preprocess needs at least one --model name=path")
    models = {name: preprocess.load_preprocess_model(path) for name, path in paths.items()}
    manifest = datastore.apply_preprocess(dataset, models, args.out_dir, quantize=args.quantize)
    print(f"manifest {manifest}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    """Train a fresh or resumed model and write the checkpoint."""
    config = _config(
        args,
        seed=args.seed,
        epochs=args.epochs,
        batch_size=args.batch_size,
        sample_size=args.sample_size,
        hidden_size=args.hidden_size,
        experts=args.experts,
        lr=args.lr,
        modalities=args.modalities.split(",") if args.modalities else None,
    )
    dataset = datastore.load_dataset(_manifest_path(args, config))
    optimizer = None
    if args.resume:
        model, tensors = load_model(args.resume)
        check_against_model(list(model.modalities), dataset)
        optimizer = trainer.OptimizerState.from_tensors(tensors) if tensors else None
    else:
        model = init_model(
            resolve_modalities(config, dataset),
            dataset.num_classes,
            hidden_size=config.hidden_size,
            experts=config.experts,
            sample_size=config.sample_size,
            seed=config.seed,
        )
    result = trainer.train(
        model,
        dataset,
        epochs=config.epochs,
        batch_size=config.batch_size,
        seed=config.seed,
        hyper=trainer.AdamHyperparams(**config.optimizer),
        optimizer=optimizer,
        threads=config.threads,
    )
    for epoch, loss in enumerate(result.losses, start=1):
        print(f"epoch {epoch} loss {loss:.6f}")
    digest = save_model(result.model, args.out, result.optimizer.to_tensors())
    print(f"checkpoint {args.out} sha256 {digest}")
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    """Write repeated-average predictions for one split."""
    config = _config(args, seed=args.seed, repeats=args.repeats)
    dataset = datastore.load_dataset(_manifest_path(args, config))
    model, _ = load_model(args.ckpt)
    check_against_model(list(model.modalities), dataset)
    records = dataset.split(None if args.split == "all" else args.split)
    if not records:
        raise ConfigError(f"No videos in split {args.split!r}")
    executor = _executor(config.threads)
    try:
        probs = predict_videos(
            model, records, config.repeats, config.seed, executor.map if executor is not None else map
        )
    finally:
        if executor is not None:
            executor.shutdown()
    evaluation.prediction_set([record.id for record in records], probs).to_csv(args.out)
    print(f"predictions {args.out} videos {len(records)}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    """Print mAP of a predictions CSV, optionally writing the per-class table."""
    config = _config(args)
    dataset = datastore.load_dataset(_manifest_path(args, config))
    preds = evaluation.PredictionSet.from_csv(args.predictions).with_ground_truth(dataset)
    result = evaluation.map_eval(preds, evaluation.subset_mask(dataset, args.subset))
    print(f"mAP {result.map:.6f}")
    if result.excluded:
        print(f"excluded classes {','.join(str(index) for index in result.excluded)}")
    if args.out:
        evaluation.write_class_ap(args.out, result)
    return EXIT_OK


def cmd_ensemble(args: argparse.Namespace) -> int:
    """Average prediction CSVs, reporting member and ensemble mAP when a manifest is given."""
    members = [evaluation.PredictionSet.from_csv(path) for path in args.predictions]
    ensemble = evaluation.ensemble_average(members)
    ensemble.to_csv(args.out)
    print(f"ensemble {args.out} members {len(members)}")
    if args.manifest:
        dataset = datastore.load_dataset(args.manifest)
        labeled = [member.with_ground_truth(dataset) for member in members]
        for index, value in evaluation.member_maps(labeled).items():
            print(f"member {index} mAP {value:.6f}")
        print(f"mAP {evaluation.map_eval(ensemble.with_ground_truth(dataset)).map:.6f}")
    return EXIT_OK


def _loaded(args: argparse.Namespace):
    """Run config, dataset and checkpoint model shared by the introspection commands."""
    config = _config(args, seed=args.seed)
    dataset = datastore.load_dataset(_manifest_path(args, config))
    model, _ = load_model(args.ckpt)
    check_against_model(list(model.modalities), dataset)
    return config, dataset, model


def cmd_ablate(args: argparse.Namespace) -> int:
    """Per-modality zero-pad contribution for one video and class."""
    config, dataset, model = _loaded(args)
    report = introspect.modality_contribution(model, dataset.video(args.video), args.class_index, config.seed)
    for name, value in report.contributions.items():
        print(f"{name} contribution {value:.6f}")
    introspect.export_reports([report], args.out, args.format)
    return EXIT_OK


def cmd_inspect_clusters(args: argparse.Namespace) -> int:
    """Top frames of a cluster, or one video's assignment histogram."""
    config, dataset, model = _loaded(args)
    if args.video:
        reports: List[object] = [
            introspect.assignment_histogram(model, dataset.video(args.video), args.modality, config.seed)
        ]
    else:
        if args.cluster is None:
            raise ConfigError("inspect-clusters needs --cluster (or --video for a histogram)")
        seed = None if args.all_frames else config.seed
        reports = introspect.top_frames_for_cluster(
            model, dataset, args.modality, args.cluster, args.top, seed=seed, split=args.split
        )
    introspect.export_reports(reports, args.out, args.format)
    print(f"report {args.out} entries {len(reports)}")
    return EXIT_OK


def cmd_timeline(args: argparse.Namespace) -> int:
    """Class probability over growing prefixes of one video."""
    config, dataset, model = _loaded(args)
    step = args.step if args.step is not None else config.timeline_step_s
    timeline = introspect.probability_timeline(model, dataset.video(args.video), args.class_index, step, config.seed)
    introspect.export_reports([timeline], args.out, args.format)
    print(f"timeline {args.out} points {len(timeline.points)}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    """Finite-difference check of every gradient on a small random model."""
    config = _config(
        args,
        dict(GRADCHECK_MODEL),
        seed=args.seed,
        hidden_size=args.hidden_size,
        experts=args.experts,
        sample_size=args.sample_size,
    )
    specs = []
    for index in range(args.modalities):
        name = f"m{index}"
        clusters = args.clusters if args.clusters is not None else config.clusters.get(name, GRADCHECK_CLUSTERS)
        specs.append(ModalitySpec(name, args.dim, 1.0, clusters))
    model = init_model(
        specs,
        args.classes,
        hidden_size=config.hidden_size,
        experts=config.experts,
        sample_size=config.sample_size,
        seed=config.seed,
    )
    sample = trainer.make_gradcheck_sample(model, config.seed, zero=args.zero_input)
    report = trainer.gradient_check(model, sample, args.step, args.tolerance)
    for entry in report.entries:
        print(f"{entry.name} max_rel_error {entry.max_rel_error:.3e} {'ok' if entry.passed else 'FAIL'}")
    print(f"gradcheck {'passed' if report.passed else 'failed'}")
    return EXIT_OK if report.passed else EXIT_FAILURE


def cmd_synth(args: argparse.Namespace) -> int:
    """Generate a synthetic dataset from a spec file or a preset."""
    if args.spec:
        spec = synthgen.load_synth_spec(args.spec)
    elif args.preset:
        spec = synthgen.PRESETS[args.preset](seed=args.seed or 0)
    else:
        raise ConfigError("synth needs --spec or --preset")
    manifest = synthgen.generate(spec, args.out)
    print(f"manifest {manifest}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subcommand per pipeline stage."""
    parser = argparse.ArgumentParser(prog=DOMAIN, description="Multi-modal VLAD aggregation for video classification")
    parser.add_argument(
        "--version",
        action="version",
        version=f"{DOMAIN} {VERSION} (features {FEATURE_MAGIC.decode()}, "
        f"checkpoint {CHECKPOINT_MAGIC.decode()} v{CHECKPOINT_VERSION})",
    )
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("-v", "--verbose", action="store_true", help="shortcut for --log-level INFO")
    parser.add_argument("--threads", type=int, default=None, help="worker threads (default from config, 1)")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")

    with_manifest = argparse.ArgumentParser(add_help=False, parents=[common])
    with_manifest.add_argument("--manifest", help="dataset manifest (default from config)")

    introspection = argparse.ArgumentParser(add_help=False, parents=[with_manifest])
    introspection.add_argument("--ckpt", required=True)
    introspection.add_argument("--seed", type=int)
    introspection.add_argument("--format", choices=introspect.EXPORT_FORMATS, default="csv")
    introspection.add_argument("--out", required=True)

    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    cmd = sub.add_parser("fit-preprocess", parents=[with_manifest], help="fit PCA/whitening per modality")
    cmd.add_argument("--dim", type=_key_value, action="append", metavar="NAME=D", help="target dim per modality")
    cmd.add_argument("--out-dir", required=True)
    cmd.add_argument("--seed", type=int)
    cmd.add_argument("--max-frames", type=int)
    cmd.set_defaults(func=cmd_fit_preprocess)

    cmd = sub.add_parser("apply-preprocess", parents=[with_manifest], help="transform features, write a manifest")
    cmd.add_argument("--model", type=_key_value, action="append", metavar="NAME=PATH")
    cmd.add_argument("--out-dir", required=True)
    cmd.add_argument("--quantize", action="store_true", help="write 8-bit quantized feature files")
    cmd.set_defaults(func=cmd_apply_preprocess)

    cmd = sub.add_parser("train", parents=[with_manifest], help="train a model and write a checkpoint")
    cmd.add_argument("--out", required=True, help="checkpoint path")
    cmd.add_argument("--epochs", type=int)
    cmd.add_argument("--seed", type=int)
    cmd.add_argument("--batch-size", type=int)
    cmd.add_argument("--sample-size", type=int)
    cmd.add_argument("--hidden-size", type=int)
    cmd.add_argument("--experts", type=int)
    cmd.add_argument("--lr", type=float)
    cmd.add_argument("--modalities", help="comma-separated subset of the manifest's modalities")
    cmd.add_argument("--resume", help="continue from a checkpoint (model and optimizer state)")
    cmd.set_defaults(func=cmd_train)

    cmd = sub.add_parser("predict", parents=[with_manifest], help="repeated-average predictions to CSV")
    cmd.add_argument("--ckpt", required=True)
    cmd.add_argument("--out", required=True)
    cmd.add_argument("--split", default=SPLIT_VAL, help="train, val, test or all")
    cmd.add_argument("--repeats", type=int)
    cmd.add_argument("--seed", type=int)
    cmd.set_defaults(func=cmd_predict)

    cmd = sub.add_parser("evaluate", parents=[with_manifest], help="mAP of a predictions CSV")
    cmd.add_argument("--predictions", required=True)
    cmd.add_argument("--subset", help="named class subset from the manifest")
    cmd.add_argument("--out", help="per-class AP CSV")
    cmd.set_defaults(func=cmd_evaluate)

    cmd = sub.add_parser("ensemble", help="average several predictions CSVs")
    cmd.add_argument("predictions", nargs="+")
    cmd.add_argument("--out", required=True)
    cmd.add_argument("--manifest", help="also report member and ensemble mAP")
    cmd.set_defaults(func=cmd_ensemble)

    cmd = sub.add_parser("ablate", parents=[introspection], help="zero-pad modality contributions")
    cmd.add_argument("--video", required=True)
    cmd.add_argument("--class", dest="class_index", type=int, required=True)
    cmd.set_defaults(func=cmd_ablate)

    cmd = sub.add_parser("inspect-clusters", parents=[introspection], help="top frames or assignment histogram")
    cmd.add_argument("--modality", required=True)
    cmd.add_argument("--cluster", type=int)
    cmd.add_argument("--top", type=int, default=10)
    cmd.add_argument("--video", help="histogram of one video instead of top frames")
    cmd.add_argument("--split", help="restrict the top-frame scan to one split")
    cmd.add_argument("--all-frames", action="store_true", help="scan every frame, not only sampled ones")
    cmd.set_defaults(func=cmd_inspect_clusters)

    cmd = sub.add_parser("timeline", parents=[introspection], help="class probability over growing prefixes")
    cmd.add_argument("--video", required=True)
    cmd.add_argument("--class", dest="class_index", type=int, required=True)
    cmd.add_argument("--step", type=float, help="seconds between points")
    cmd.set_defaults(func=cmd_timeline)

    cmd = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check on a small model")
    cmd.add_argument("--modalities", type=int, default=2)
    cmd.add_argument("--dim", type=int, default=4)
    cmd.add_argument("--clusters", type=int, help="clusters per modality (default from config, 3)")
    cmd.add_argument("--classes", type=int, default=5)
    cmd.add_argument("--hidden-size", type=int, help="default from config, 8")
    cmd.add_argument("--experts", type=int, help="default from config, 2")
    cmd.add_argument("--sample-size", type=int, help="default from config, 6")
    cmd.add_argument("--step", type=float, default=GRADCHECK_STEP)
    cmd.add_argument("--tolerance", type=float, default=GRADCHECK_TOLERANCE)
    cmd.add_argument("--seed", type=int)
    cmd.add_argument("--zero-input", action="store_true")
    cmd.set_defaults(func=cmd_gradcheck)

    cmd = sub.add_parser("synth", help="generate a synthetic dataset")
    cmd.add_argument("--spec", help="JSON synth spec")
    cmd.add_argument("--preset", choices=sorted(synthgen.PRESETS))
    cmd.add_argument("--seed", type=int)
    cmd.add_argument("--out", required=True, help="output directory")
    cmd.set_defaults(func=cmd_synth)

    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv`` and run one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        # argparse exits after printing usage errors, --help or --version
        return err.code if isinstance(err.code, int) else EXIT_USAGE
    level = "INFO" if args.verbose and args.log_level == "WARNING" else args.log_level
    logging.basicConfig(level=getattr(logging, level), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MMAggError as err:
        _LOGGER.error("%s failed: %s", args.command, err)
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAILURE


def main() -> None:
    """Console script entry point."""
    sys.exit(run(sys.argv[1:]))
