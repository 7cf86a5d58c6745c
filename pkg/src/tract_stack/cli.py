"""CLI entry point for tract-stack.

Exit codes: 0 success, 1 verification failure, 2 usage/config/data error,
3 numerical divergence during training.
"""

import argparse
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

from tract_stack import __version__
from tract_stack.config import load_run_config, write_effective_config
from tract_stack.env import default_threads, load_project_env
from tract_stack.checkpoint import atomic_write_bytes
from tract_stack.errors import DivergenceError, IoError, PairingError, TractStackError
from tract_stack.formatter import (
    format_comparison,
    format_gradcheck,
    format_history,
    format_report,
)
from tract_stack.gradcheck import run_suite
from tract_stack.manifest import SCHEMA_VERSION, load_manifest, save_manifest, write_records
from tract_stack.metrics import DiceReport, compare, evaluate, subject_sort_key
from tract_stack.phantom import BUNDLE_PRESETS, downsample, generate, subject_spec
from tract_stack.planes import SlicePlane
from tract_stack.stack import (
    load_plain,
    load_stacked,
    predict_plain,
    predict_stacked,
    save_plain,
    save_stacked,
    train_plain,
    train_stacked,
)
from tract_stack.volume_io import BinaryMask, PeakVolume, load_nifti, save_nifti

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3

SPLITS = ("train", "val", "test")
MASK_SUFFIX = "_mask.nii.gz"
PEAKS_SUFFIX = "_peaks.nii.gz"


def _fail(message: str, code: int = EXIT_USAGE) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _ensure_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {path}: {exc}") from exc
    return path


# --- data set helpers ---


def split_subjects(ids: list[str], split: tuple[int, int, int]) -> dict[str, list[str]]:
    """Assign subjects in order; counts scale with len(ids) when it differs from the split total."""
    n, total = len(ids), sum(split)
    if n == total or total == 0:
        counts = list(split) if total else [n, 0, 0]
    else:
        counts = [round(n * split[0] / total), round(n * split[1] / total)]
        counts[0] = max(1, min(counts[0], n))
        counts[1] = min(counts[1], n - counts[0])
        counts.append(n - counts[0] - counts[1])
    bounds = [0, counts[0], counts[0] + counts[1], n]
    return {name: ids[bounds[i] : bounds[i + 1]] for i, name in enumerate(SPLITS)}


def _load_pairs(data_dir: Path, subjects: list[str]) -> list[tuple[PeakVolume, BinaryMask]]:
    pairs = []
    for subject in subjects:
        peaks = load_nifti(data_dir / f"{subject}{PEAKS_SUFFIX}", kind="peaks")
        mask = load_nifti(data_dir / f"{subject}{MASK_SUFFIX}", kind="mask")
        pairs.append((peaks, mask))
    return pairs


def _collect_masks(directory: Path) -> dict[str, BinaryMask]:
    if not directory.is_dir():
        raise PairingError(f"not a directory: {directory}")
    masks = {}
    for path in sorted(directory.glob(f"*{MASK_SUFFIX}")):
        masks[path.name[: -len(MASK_SUFFIX)]] = load_nifti(path, kind="mask")
    return masks


# --- commands ---


def _cmd_phantom(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    if args.n is not None and args.n < 1:
        return _fail("--n must be >= 1 (usage: tract-stack phantom --n N --out DIR)")
    n = args.n if args.n is not None else sum(config.split)
    seed = args.seed if args.seed is not None else config.phantom.seed
    out_dir = Path(args.out or config.paths.data_dir)

    spec = config.phantom
    bundle = config.bundle
    if args.bundle is not None:
        spec = replace(spec, **BUNDLE_PRESETS[args.bundle])
        bundle = args.bundle
    overrides = {
        "dim": args.dim,
        "tube_radius_vox": args.tube_radius,
        "peak_noise_sigma": args.noise,
        "distractor_density": args.distractor_density,
    }
    spec = replace(spec, **{k: v for k, v in overrides.items() if v is not None})
    spec.validate()

    _ensure_dir(out_dir)
    subjects = []
    for i in range(n):
        subject = f"subject_{i}"
        peaks, mask = generate(subject_spec(spec, i, seed))
        if args.downsample > 1:
            peaks, mask = downsample(peaks, mask, args.downsample)
        save_nifti(peaks, out_dir / f"{subject}{PEAKS_SUFFIX}")
        save_nifti(mask, out_dir / f"{subject}{MASK_SUFFIX}")
        subjects.append({"id": subject, "peaks": f"{subject}{PEAKS_SUFFIX}", "mask": f"{subject}{MASK_SUFFIX}"})
        log.info("%s: %d foreground voxels", subject, mask.count)

    ids = [s["id"] for s in subjects]
    save_manifest(out_dir, {
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "n": n,
        "bundle": bundle,
        "downsample": args.downsample,
        "split": split_subjects(ids, config.split),
        "spec": asdict(spec),
        "subjects": subjects,
    })
    print(f"Wrote {2 * n} volumes and manifest.json to {out_dir}")
    return EXIT_OK


def _parse_mode(mode: str) -> SlicePlane | None:
    if mode == "stacked":
        return None
    kind, _, plane = mode.partition(":")
    if kind != "plain" or not plane:
        raise argparse.ArgumentTypeError(f"invalid --mode '{mode}' (stacked or plain:<xy|yz|zx>)")
    return SlicePlane.parse(plane)


def _cmd_train(args: argparse.Namespace) -> int:
    config = load_run_config(
        args.config, epochs=args.epochs, preset=args.preset, seed=args.seed
    )
    data_dir = Path(args.data or config.paths.data_dir)
    model_dir = Path(args.out or config.paths.model_dir)
    plane = _parse_mode(args.mode)

    manifest = load_manifest(data_dir, required=True)
    split = manifest.get("split", {})
    bundle = manifest.get("bundle", config.bundle)
    train_pairs = _load_pairs(data_dir, split.get("train", []))
    val_ids = split.get("val") or split.get("train", [])
    if not split.get("val"):
        log.warning("no validation subjects in manifest; validating on the training set")
    val_pairs = _load_pairs(data_dir, val_ids)

    _ensure_dir(model_dir)
    write_effective_config(config, model_dir)
    start = time.perf_counter()
    if plane is None:
        result = train_stacked(
            train_pairs, val_pairs, config.train,
            bundle=bundle, threads=args.threads, val_prediction_dir=args.save_val_predictions,
        )
        save_stacked(result.model, model_dir)
        for name, history in result.histories.items():
            write_records(model_dir / f"history_{name}.jsonl", (r.as_record() for r in history))
        print(format_history(result.histories["fusion"], as_json=args.json))
        selected = result.model.metadata["selected_epochs"]
        print(f"Selected epochs: {', '.join(f'{k}={v}' for k, v in selected.items())}")
    else:
        result = train_plain(
            train_pairs, val_pairs, config.train, plane,
            val_prediction_dir=args.save_val_predictions,
        )
        ckpt = model_dir / f"plain_{plane.value}.ckpt"
        save_plain(
            result.best, ckpt, plane,
            bundle=bundle,
            normalization=config.train.normalization,
            selected_epoch=result.best_epoch,
        )
        write_records(model_dir / f"history_{plane.value}.jsonl", (r.as_record() for r in result.history))
        print(format_history(result.history, as_json=args.json))
        print(f"Selected epoch: {result.best_epoch}")
    print(f"Training finished in {time.perf_counter() - start:.1f}s; model in {model_dir}")
    return EXIT_OK


def _cmd_predict(args: argparse.Namespace) -> int:
    model_path = Path(args.model)
    if not model_path.exists():
        return _fail(f"model not found: {model_path}")
    volume = load_nifti(args.input, kind="peaks")
    start = time.perf_counter()
    if model_path.is_dir():
        model = load_stacked(model_path)
        probs, mask = predict_stacked(model, volume, threshold=args.threshold, threads=args.threads)
    else:
        params, meta = load_plain(model_path)
        probs, mask = predict_plain(
            params, volume, meta["plane"],
            normalization=meta.get("normalization", "joint"),
            threshold=args.threshold,
        )
    elapsed = time.perf_counter() - start

    prefix = Path(args.out_prefix)
    _ensure_dir(prefix.parent)
    save_nifti(probs, prefix.with_name(f"{prefix.name}_prob.nii.gz"))
    save_nifti(mask, prefix.with_name(f"{prefix.name}{MASK_SUFFIX}"))
    print(f"Inference took {elapsed:.2f}s ({mask.count} voxels segmented)")
    return EXIT_OK


def _parse_method(value: str) -> tuple[str, Path]:
    name, sep, directory = value.partition("=")
    if not sep or not name or not directory:
        raise argparse.ArgumentTypeError(f"expected NAME=DIR, got '{value}'")
    return name, Path(directory)


def _cmd_evaluate(args: argparse.Namespace) -> int:
    methods = list(args.method or [])
    if args.pred is not None:
        methods.insert(0, (args.name, Path(args.pred)))
    if not methods:
        return _fail("give --pred DIR or at least one --method NAME=DIR")

    ref_dir = Path(args.ref)
    references = _collect_masks(ref_dir)
    manifest = load_manifest(ref_dir)
    bundle = args.bundle or manifest.get("bundle", "bundle")
    if args.split != "all" and manifest:
        wanted = set(manifest.get("split", {}).get(args.split, []))
        references = {k: v for k, v in references.items() if k in wanted}

    reports: list[DiceReport] = []
    for name, pred_dir in methods:
        predictions = _collect_masks(pred_dir)
        reports.append(evaluate(
            sorted(predictions.items(), key=lambda kv: subject_sort_key(kv[0])),
            sorted(references.items(), key=lambda kv: subject_sort_key(kv[0])),
            method=name,
            bundle=bundle,
        ))

    out = Path(args.out)
    text = "\n\n".join(format_report(r) for r in reports)
    if len(reports) > 1:
        text += "\n\n" + format_comparison(reports)
    atomic_write_bytes(out.with_suffix(".txt"), (text + "\n").encode("utf-8"))
    write_records(out.with_suffix(".jsonl"), compare(reports))
    if args.json:
        print(format_comparison(reports, as_json=True))
    else:
        print(text)
    return EXIT_OK


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    results = run_suite(seed=args.seed)
    print(format_gradcheck(results, as_json=args.json))
    failed = [r.op for r in results if not r.passed]
    if failed:
        return _fail(f"gradient check failed for: {', '.join(failed)}", EXIT_VERIFY)
    return EXIT_OK


# --- parser ---


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tract-stack",
        description="White matter bundle segmentation with stacked 2D U-Nets",
    )
    parser.add_argument("--version", action="version", version=f"tract-stack {__version__}")
    parser.add_argument("--threads", type=int, default=None,
                        help="Worker cap (default: TRACT_STACK_THREADS or 1; 1 is bitwise reproducible)")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Warnings and errors only")
    subparsers = parser.add_subparsers(dest="command")

    # phantom
    p_phantom = subparsers.add_parser("phantom", help="Generate a synthetic phantom dataset")
    p_phantom.add_argument("--n", type=int, default=None, help="Number of subjects (default: split total)")
    p_phantom.add_argument("--seed", type=int, default=None, help="Dataset seed")
    p_phantom.add_argument("--out", default=None, help="Output directory (default: paths.data_dir)")
    p_phantom.add_argument("--config", default=None, help="Run config JSON")
    p_phantom.add_argument("--bundle", choices=sorted(BUNDLE_PRESETS), default=None,
                           help="Difficulty preset")
    p_phantom.add_argument("--dim", type=int, default=None, help="Cube side in voxels")
    p_phantom.add_argument("--tube-radius", type=float, default=None, help="Bundle radius in voxels")
    p_phantom.add_argument("--noise", type=float, default=None, help="Peak noise sigma")
    p_phantom.add_argument("--distractor-density", type=float, default=None,
                           help="Fraction of background voxels with a random peak")
    p_phantom.add_argument("--downsample", type=int, default=1,
                           help="Block-average by this factor (low-resolution variant)")
    p_phantom.set_defaults(func=_cmd_phantom)

    # train
    p_train = subparsers.add_parser("train", help="Train a stacked or plain model")
    p_train.add_argument("--config", default=None, help="Run config JSON")
    p_train.add_argument("--data", default=None, help="Phantom/data directory with manifest.json")
    p_train.add_argument("--out", default=None, help="Model directory (default: paths.model_dir)")
    p_train.add_argument("--mode", default="stacked", help="stacked (default) or plain:<xy|yz|zx>")
    p_train.add_argument("--epochs", type=int, default=None, help="Override train.epochs")
    p_train.add_argument("--preset", default=None, help="Override train.preset")
    p_train.add_argument("--seed", type=int, default=None, help="Override train.seed")
    p_train.add_argument("--json", action="store_true", help="JSON history output")
    p_train.add_argument("--save-val-predictions", default=None, metavar="DIR",
                         help="Save every epoch's validation probabilities under DIR/<network>/")
    p_train.set_defaults(func=_cmd_train)

    # predict
    p_predict = subparsers.add_parser("predict", help="Segment one peak volume")
    p_predict.add_argument("model", help="Stacked model directory or plain checkpoint")
    p_predict.add_argument("input", help="Peak volume (.nii/.nii.gz)")
    p_predict.add_argument("out_prefix", help="Writes <prefix>_prob.nii.gz and <prefix>_mask.nii.gz")
    p_predict.add_argument("--threshold", type=float, default=0.5, help="Mask threshold")
    p_predict.set_defaults(func=_cmd_predict)

    # evaluate
    p_eval = subparsers.add_parser("evaluate", help="Dice report against reference masks")
    p_eval.add_argument("--pred", default=None, help="Directory of <subject>_mask.nii.gz predictions")
    p_eval.add_argument("--name", default="model", help="Method name for --pred")
    p_eval.add_argument("--method", type=_parse_method, action="append",
                        help="NAME=DIR, repeatable for method comparisons")
    p_eval.add_argument("--ref", required=True, help="Reference directory (phantom data dir)")
    p_eval.add_argument("--out", required=True, help="Report path prefix (.txt and .jsonl)")
    p_eval.add_argument("--split", choices=("all", *SPLITS), default="test",
                        help="Reference subjects to use when a manifest exists (default: test)")
    p_eval.add_argument("--bundle", default=None, help="Bundle name (default: from manifest)")
    p_eval.add_argument("--json", action="store_true", help="JSON summary output")
    p_eval.set_defaults(func=_cmd_evaluate)

    # gradcheck
    p_grad = subparsers.add_parser("gradcheck", help="Finite-difference check of every op")
    p_grad.add_argument("--seed", type=int, default=7, help="Suite seed")
    p_grad.add_argument("--json", action="store_true", help="JSON output")
    p_grad.set_defaults(func=_cmd_gradcheck)

    return parser


def run(argv: list[str] | None = None) -> int:
    load_project_env()
    parser = _build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if not hasattr(args, "func"):
        parser.print_help()
        return EXIT_USAGE
    if args.threads is None:
        args.threads = default_threads()
    if args.threads < 1:
        return _fail("--threads must be >= 1")
    try:
        return args.func(args)
    except DivergenceError as exc:
        return _fail(str(exc), EXIT_DIVERGED)
    except (TractStackError, argparse.ArgumentTypeError, OSError) as exc:
        return _fail(str(exc))


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
