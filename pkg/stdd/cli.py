"""
Command-line surface.

Every command reads a RunConfig (file plus --set overrides), writes UTF-8
JSON reports under --out and prints a short summary. Exit codes: 0 success,
1 invariant failure, 2 configuration or usage error, 3 I/O error.
"""
import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from . import bench, selftest
from . import tensor as tn
from .alignment import TextBank, prediction_report, score
from .askg import ASKGBuilder, GraphStore, action_slug
from .config import RunConfig
from .encoder import VARIANTS, EncoderWeights, VideoEncoder
from .errors import ConfigurationError, ReportIOError, STDDError, ValidationError
from .llm_client import FIXTURE_DIR, FixtureClient, HTTPClient
from .prompt_bank import HashingTextEmbedder, load_prompt_banks, save_prompt_banks, triples_to_prompts
from .training import ToyTrainingConfig, synthetic_text_bank, train_toy
from .video import SYNTHETIC_CLASSES, load_frame_directory, sample_views, synthetic_video

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_USAGE = 2
EXIT_IO = 3
TRAIN_REDUCTION = 0.5


class UsageError(STDDError):
    """Arguments that parse but cannot be acted on."""


def _out_path(args, name):
    return os.path.join(args.out, name)


def _finish(report, args, name, schema):
    path = bench.write_report(report, _out_path(args, name), schema)
    print(f"Report written to {path}")
    return path


def load_config(args):
    """RunConfig from --config and --set, with --out and --threads folded in."""
    if args.config:
        config = RunConfig.from_file(args.config, args.overrides)
    else:
        config = RunConfig().apply_overrides(args.overrides)
    if args.threads is not None:
        config.threads = args.threads
    if args.out is None:
        args.out = config.output_dir
    config.output_dir = args.out
    is_valid, messages = config.is_valid()
    if not is_valid:
        config.validate()
        raise ConfigurationError("; ".join(messages))
    return config


def cmd_selftest(args, config):
    results = selftest.run_selftest(inject_fault=args.inject_fault)
    report = {"inject_fault": args.inject_fault, "checks": [r.to_dict() for r in results],
              "passed": all(r.passed for r in results)}
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<18} {r.detail} ({r.seconds:.1f}s)")
    _finish(report, args, "selftest.json", "selftest")
    if not report["passed"]:
        failed = ", ".join(r.name for r in results if not r.passed)
        print(f"Self-test failed: {failed}")
        return EXIT_INVARIANT
    print("All self-test checks passed")
    return EXIT_OK


def cmd_bench_flops(args, config):
    report = bench.cmd_bench_flops(config, measure=not args.closed_form_only)
    for point in report["points"]:
        counts = "  ".join(f"{v}={point['counts'][v]['closed_form']}" for v in VARIANTS)
        print(f"T={point['frames']:<3} N={point['patches']:<4} {counts}  ratio={point['stca_ratio']:.4f}")
    _finish(report, args, "bench_flops.json", "bench_flops")
    if args.svg:
        print(f"Chart written to {bench.render_svg(report, _out_path(args, 'bench_flops.svg'))}")
    failed = [name for name, ok in report["checks"].items() if not ok]
    if failed:
        print(f"Failed checks: {', '.join(failed)}")
        return EXIT_INVARIANT
    return EXIT_OK


def cmd_bench_runtime(args, config):
    report = bench.cmd_bench_runtime(config)
    for variant, slope in report["slopes"].items():
        print(f"{variant:<15} slope {slope:.3f}")
    _finish(report, args, "bench_runtime.json", "bench_runtime")
    if args.svg:
        print(f"Chart written to {bench.render_svg(report, _out_path(args, 'bench_runtime.svg'))}")
    if report["inconclusive"]:
        print("Timings too close to timer resolution; result inconclusive")
        return EXIT_OK
    if not report["passed"]:
        print(f"Failed checks: {', '.join(k for k, ok in report['checks'].items() if not ok)}")
        return EXIT_INVARIANT
    return EXIT_OK


def _load_weights(config, enc_cfg):
    if config.weights_path:
        return EncoderWeights.load(config.weights_path, enc_cfg)
    logger.warning("no weights_path set; using freshly initialized weights (seed %d)", config.seed)
    return EncoderWeights.initialize(enc_cfg)


def _read_video(args, config, enc_cfg):
    if args.video:
        return os.path.basename(os.path.normpath(args.video)), load_frame_directory(args.video)
    if args.synthetic not in SYNTHETIC_CLASSES:
        raise UsageError(f"--synthetic must be one of {', '.join(SYNTHETIC_CLASSES)}")
    video = synthetic_video(args.synthetic, enc_cfg.frames, enc_cfg.height, enc_cfg.width, seed=config.seed)
    return f"synthetic:{args.synthetic}", video


def cmd_encode(args, config):
    enc_cfg = config.encoder_config()
    source, video = _read_video(args, config, enc_cfg)
    clip = sample_views(video, enc_cfg.frames, enc_cfg.height, enc_cfg.width, 1, 1, seed=config.seed)[0]
    features = VideoEncoder(enc_cfg, _load_weights(config, enc_cfg)).encode(clip)
    report = {"source": source, "variant": enc_cfg.variant, "frames": enc_cfg.frames, "dim": enc_cfg.dim,
              "features": features.data.tolist()}
    _finish(report, args, "features.json", "features")
    return EXIT_OK


def _zeroshot_inputs(args, config, enc_cfg):
    """(video ids, videos, true labels or None, text bank)."""
    if args.synthetic:
        classes = list(SYNTHETIC_CLASSES)
        ids, videos, labels = [], [], []
        for label, name in enumerate(classes):
            for i in range(args.synthetic):
                ids.append(f"{action_slug(name)}_{i:03d}")
                videos.append(synthetic_video(name, enc_cfg.frames, enc_cfg.height, enc_cfg.width,
                                              seed=config.seed * 1000 + label * 100 + i))
                labels.append(label)
        bank_path = args.bank or config.text_bank_path
        bank = TextBank.load(bank_path) if bank_path else synthetic_text_bank(classes, enc_cfg.dim,
                                                                               seed=config.seed)[0]
        return ids, videos, labels, bank
    bank_path = args.bank or config.text_bank_path
    if not bank_path:
        raise UsageError("zeroshot needs a text bank (--bank or text_bank_path)")
    if not args.videos or not os.path.isdir(args.videos):
        raise ReportIOError(f"video directory not found: {args.videos}")
    bank = TextBank.load(bank_path)
    ids = sorted(n for n in os.listdir(args.videos) if os.path.isdir(os.path.join(args.videos, n)))
    videos = [load_frame_directory(os.path.join(args.videos, n)) for n in ids]
    return ids, videos, None, bank


def cmd_zeroshot(args, config):
    enc_cfg = config.encoder_config()
    ids, videos, labels, bank = _zeroshot_inputs(args, config, enc_cfg)
    if bank.dim != enc_cfg.dim:
        raise ConfigurationError(f"text bank width {bank.dim} differs from encoder width {enc_cfg.dim}",
                                 key="channels")
    encoder = VideoEncoder(enc_cfg, _load_weights(config, enc_cfg))

    def predict(item):
        video_id, video = item
        views = sample_views(video, enc_cfg.frames, enc_cfg.height, enc_cfg.width,
                             config.temporal_views, config.spatial_views, seed=config.seed)
        # dtype selection is per thread
        with tn.use_dtype(config.dtype):
            view_scores = [score(encoder.encode(v), bank, config.logit_scale).overall.data[0] for v in views]
        return prediction_report(video_id, view_scores, bank.class_names)

    with ThreadPoolExecutor(max_workers=max(1, config.threads)) as pool:
        predictions = list(pool.map(predict, zip(ids, videos)))
    accuracy = None
    if labels is not None:
        for entry, label in zip(predictions, labels):
            entry["true_class"] = label
        accuracy = float(np.mean([p["predicted_class"] == p["true_class"] for p in predictions]))
        print(f"Accuracy: {100 * accuracy:.1f}% over {len(predictions)} videos")
    report = {"classes": bank.class_names, "temporal_views": config.temporal_views,
              "spatial_views": config.spatial_views, "seed": config.seed,
              "accuracy": accuracy, "predictions": predictions}
    for entry in predictions:
        print(f"{entry['video_id']}: {entry['predicted_label']}")
    _finish(report, args, "predictions.json", "predictions")
    return EXIT_OK


def _read_classes(path):
    try:
        with open(path, encoding="utf-8") as handle:
            return [line.strip() for line in handle if line.strip() and not line.startswith("#")]
    except OSError as exc:
        raise ReportIOError(f"cannot read class list {path}: {exc}")


def cmd_askg_build(args, config):
    if args.endpoint:
        client = HTTPClient(endpoint=args.endpoint, cache_dir=args.cache)
    elif args.fixtures:
        if not os.path.isdir(args.fixtures):
            raise UsageError(f"fixture directory not found: {args.fixtures}")
        client = FixtureClient(args.fixtures)
    elif os.environ.get("STDD_LLM_ENDPOINT"):
        client = HTTPClient(cache_dir=args.cache)
    else:
        raise UsageError("askg build needs --fixtures or --endpoint")
    if args.classes:
        actions = _read_classes(args.classes)
    elif isinstance(client, FixtureClient):
        actions = [slug.replace("_", " ") for slug in client.actions()]
    else:
        raise UsageError("askg build with a live endpoint needs --classes")
    store = GraphStore(args.graph or _out_path(args, "graphs"))
    builder = ASKGBuilder(client, store, k=args.k)
    results, failures = builder.build_all(actions, max_workers=max(1, config.threads))
    for action in actions:
        if action in results:
            subgraph, _, report = results[action]
            state = "valid" if report.is_valid else f"{len(report.violations)} violations"
            print(f"{action}: {len(subgraph.objects)} objects, {len(subgraph.sub_actions)} sub-actions, "
                  f"{len(subgraph.triples)} triples ({state}) -> {store.path_for(action)}")
        else:
            print(f"{action}: failed ({failures[action]})")
    return EXIT_IO if failures else EXIT_OK


def cmd_askg_prompts(args, config):
    store = GraphStore(args.graph or _out_path(args, "graphs"))
    paths = store.list_paths()
    if not paths:
        raise ReportIOError(f"no graph files in {store.directory}")
    banks = [triples_to_prompts(*GraphStore.read_path(path)) for path in paths]
    out_dir = args.prompts_out or args.out
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "prompts.json")
    save_prompt_banks(path, banks)
    for bank in banks:
        print(f"{bank.action}: {len(bank.spatial)} spatial, {len(bank.temporal)} temporal prompts")
    print(f"Prompts written to {path}")
    if args.embed:
        bank = TextBank.from_prompt_banks(load_prompt_banks(path), HashingTextEmbedder(config.channels, config.seed))
        bank_path = os.path.join(out_dir, "text_bank.json")
        bank.save(bank_path)
        print(f"Text bank written to {bank_path}")
    return EXIT_OK


def cmd_train_toy(args, config):
    seeds = args.seeds or [config.seed]
    base = ToyTrainingConfig(learning_rate=config.learning_rate, steps=config.train_steps,
                             videos_per_class=config.videos_per_class)
    runs = [train_toy(replace(base, seed=seed)) for seed in seeds]
    for run in runs:
        print(f"seed {run.seed}: CE {run.initial_ce:.4f} -> {run.final_ce:.4f} "
              f"({100 * run.reduction:.1f}% lower, {run.seconds:.1f}s)")
    report = {"runs": [r.to_dict() for r in runs],
              "passed": all(r.reduction >= TRAIN_REDUCTION for r in runs)}
    _finish(report, args, "train_toy.json", "train_toy")
    return EXIT_OK if report["passed"] else EXIT_INVARIANT


def _seed_list(text):
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration value (repeatable)")
    common.add_argument("--out", help="output directory (default: output_dir setting)")
    common.add_argument("--threads", type=int, help="worker threads for parallel commands")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    common.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")

    parser = argparse.ArgumentParser(prog="stdd", description="Space-time cross attention toolkit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("selftest", parents=[common], help="run the built-in property checks")
    p.add_argument("--inject-fault", choices=selftest.FAULTS, help="break a property on purpose")
    p.set_defaults(handler=cmd_selftest)

    p = sub.add_parser("bench-flops", parents=[common], help="attention pair counts over a (T, N) grid")
    p.add_argument("--closed-form-only", action="store_true", help="skip the counted forward passes")
    p.add_argument("--svg", action="store_true", help="also render an SVG chart")
    p.set_defaults(handler=cmd_bench_flops)

    p = sub.add_parser("bench-runtime", parents=[common], help="forward wall time against frame count")
    p.add_argument("--svg", action="store_true", help="also render an SVG chart")
    p.set_defaults(handler=cmd_bench_runtime)

    p = sub.add_parser("encode", parents=[common], help="encode one video into frame features")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--video", help="directory of frame files")
    source.add_argument("--synthetic", help="synthetic class name")
    p.set_defaults(handler=cmd_encode)

    p = sub.add_parser("zeroshot", parents=[common], help="multi-view zero-shot prediction")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--videos", help="directory with one frame directory per video")
    source.add_argument("--synthetic", type=int, metavar="PER_CLASS", help="generate synthetic videos")
    p.add_argument("--bank", help="text bank JSON (default: text_bank_path setting)")
    p.set_defaults(handler=cmd_zeroshot)

    p = sub.add_parser("askg", help="action knowledge graphs and prompts")
    askg_sub = p.add_subparsers(dest="askg_command")
    b = askg_sub.add_parser("build", parents=[common], help="query the LLM and store graphs")
    b.add_argument("--classes", help="file with one action name per line")
    b.add_argument("--fixtures", nargs="?", const=FIXTURE_DIR, help="replay recorded responses")
    b.add_argument("--endpoint", help="chat-completion endpoint URL")
    b.add_argument("--cache", help="directory recording live requests and responses")
    b.add_argument("--graph", help="graph output directory (default: <out>/graphs)")
    b.add_argument("-k", type=int, default=7, help="entities requested per list")
    b.set_defaults(handler=cmd_askg_build)
    r = askg_sub.add_parser("prompts", parents=[common], help="turn stored graphs into prompt banks")
    r.add_argument("--graph", help="graph directory (default: <out>/graphs)")
    r.add_argument("--prompts-out", help="prompt output directory (default: <out>)")
    r.add_argument("--embed", action="store_true", help="also write a hashed text bank")
    r.set_defaults(handler=cmd_askg_prompts)

    p = sub.add_parser("train-toy", parents=[common], help="gradient descent on synthetic classes")
    p.add_argument("--seeds", type=_seed_list, help="comma-separated seeds (default: seed setting)")
    p.set_defaults(handler=cmd_train_toy)
    return parser


def configure_logging(args):
    level = logging.INFO
    if getattr(args, "verbose", False):
        level = logging.DEBUG
    elif getattr(args, "quiet", False):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)


def main(argv=None):
    """
    Parse arguments, run one command and return its exit code.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if not hasattr(args, "handler"):
        parser.print_help()
        return EXIT_USAGE
    configure_logging(args)
    try:
        config = load_config(args)
        with tn.use_dtype(config.dtype):
            return args.handler(args, config)
    except (ConfigurationError, ValidationError, UsageError) as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ReportIOError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except STDDError as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except KeyboardInterrupt:
        print("\nInterrupted", file=sys.stderr)
        return 130
