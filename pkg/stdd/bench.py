"""
Attention complexity benchmarks.

Pair-interaction counts (closed form against counted) over a grid of frame
and patch counts, forward-pass wall times with a log-log scaling fit, JSON
schema validation of the reports and optional SVG charts.
"""
import json
import logging
import math
import os
import statistics
import time
from dataclasses import replace

import jsonschema
import numpy as np

from . import tensor as tn
from .encoder import VARIANTS, EncoderWeights, VideoEncoder, closed_form_pairs, measured_pairs
from .errors import ReportIOError, ValidationError

logger = logging.getLogger(__name__)

SCHEMA_DIR = os.path.join(os.path.dirname(__file__), "schemas")
STCA_SLOPE_BAND = (0.8, 1.3)
FULL_SLOPE_MIN = 1.6
# Width used for counted passes; counts do not depend on it.
COUNT_DIM = 16
COUNT_HEADS = 2


def _grid_config(base, frames, patches):
    side = int(round(math.sqrt(patches)))
    if side * side != patches:
        raise ValidationError(f"patch count {patches} is not a square grid")
    return replace(base, frames=frames, height=side * base.patch, width=side * base.patch)


def cmd_bench_flops(config, measure=True):
    """
    Closed-form and counted pair interactions for every variant over the (T, N) grid.

    Args:
        config (RunConfig): Supplies the encoder shape and the bench_frames / bench_patches grid
        measure (bool): Also run counted forward passes

    Returns:
        dict: Report with one entry per grid point and variant, plus checks
    """
    base = config.encoder_config(dim=COUNT_DIM, heads=COUNT_HEADS)
    scales = len(base.mix.scales)
    ratio_bound = 1 + scales * base.window.ratio ** 2
    points = []
    checks = {"counts_match": True, "ratio_within_bound": True,
              "full_spacetime_quadratic": True, "stca_linear": True}
    by_variant = {v: {} for v in VARIANTS}
    for patches in config.bench_patches:
        for frames in config.bench_frames:
            cfg = _grid_config(base, frames, patches)
            cfg.validate()
            weights = EncoderWeights.initialize(cfg)
            row = {"frames": frames, "patches": patches, "counts": {}}
            for variant in VARIANTS:
                closed = closed_form_pairs(cfg, variant)
                entry = {"closed_form": closed}
                if measure:
                    entry["measured"] = measured_pairs(cfg, variant, weights)
                    entry["match"] = entry["measured"] == closed
                    checks["counts_match"] &= entry["match"]
                row["counts"][variant] = entry
                by_variant[variant][(patches, frames)] = closed
            ratio = row["counts"]["stca"]["closed_form"] / row["counts"]["spatial_only"]["closed_form"]
            row["stca_ratio"] = ratio
            checks["ratio_within_bound"] &= ratio <= ratio_bound
            points.append(row)
    for (patches, frames), count in by_variant["full_spacetime"].items():
        doubled = by_variant["full_spacetime"].get((patches, 2 * frames))
        if doubled is not None:
            checks["full_spacetime_quadratic"] &= doubled == 4 * count
        doubled = by_variant["stca"].get((patches, 2 * frames))
        if doubled is not None:
            checks["stca_linear"] &= doubled == 2 * by_variant["stca"][(patches, frames)]
    report = {
        "kind": "flops",
        "layers": base.layers,
        "scales": list(base.mix.scales),
        "mask_ratio": base.window.ratio,
        "ratio_bound": ratio_bound,
        "points": points,
        "checks": checks,
        "passed": all(checks.values()),
    }
    logger.info("flops benchmark: %d grid points, passed=%s", len(points), report["passed"])
    return report


def fit_slope(xs, ys):
    """Least-squares slope of log(y) against log(x)."""
    slope, _ = np.polyfit(np.log(np.asarray(xs, dtype=float)), np.log(np.asarray(ys, dtype=float)), 1)
    return float(slope)


def _time_forward(encoder, videos, repeats):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        encoder.encode(videos)
        times.append(time.perf_counter() - start)
    return statistics.median(times)


def cmd_bench_runtime(config, variants=("spatial_only", "stca", "full_spacetime", "factorized")):
    """
    Median forward wall time per frame count at fixed N, with fitted log-log slopes.

    Runs in float32 on batches of `bench_batch` random videos.

    Returns:
        dict: Report with timings, slopes and pass/inconclusive flags
    """
    base = config.encoder_config()
    resolution = time.get_clock_info("perf_counter").resolution
    rng = np.random.default_rng(config.seed)
    timings = {v: [] for v in variants}
    with tn.use_dtype(np.float32):
        for frames in config.bench_frames:
            shape = (config.bench_batch, frames, base.height, base.width, 3)
            videos = rng.uniform(0.0, 1.0, size=shape).astype(np.float32)
            for variant in variants:
                cfg = replace(base, frames=frames, variant=variant)
                encoder = VideoEncoder(cfg)
                encoder.encode(videos[:1])
                seconds = _time_forward(encoder, videos, config.bench_repeats)
                timings[variant].append(seconds)
                logger.info("runtime %s T=%d: %.4fs", variant, frames, seconds)
    fastest = min(min(v) for v in timings.values())
    inconclusive = fastest < 100 * resolution
    slopes = {v: fit_slope(config.bench_frames, t) for v, t in timings.items()}
    checks = {}
    if "stca" in slopes:
        checks["stca_linear"] = STCA_SLOPE_BAND[0] <= slopes["stca"] <= STCA_SLOPE_BAND[1]
    if "full_spacetime" in slopes:
        checks["full_spacetime_superlinear"] = slopes["full_spacetime"] >= FULL_SLOPE_MIN
    if inconclusive:
        logger.warning("fastest pass took %.2e s, too close to timer resolution %.1e s", fastest, resolution)
    return {
        "kind": "runtime",
        "frames": list(config.bench_frames),
        "patches": base.n_patches,
        "dim": base.dim,
        "layers": base.layers,
        "batch": config.bench_batch,
        "repeats": config.bench_repeats,
        "dtype": "float32",
        "seconds": timings,
        "slopes": slopes,
        "checks": checks,
        "inconclusive": inconclusive,
        "passed": all(checks.values()),
    }


def load_schema(name):
    path = os.path.join(SCHEMA_DIR, f"{name}.schema.json")
    try:
        with open(path, encoding="utf-8") as handle:
            return json.load(handle)
    except (OSError, json.JSONDecodeError) as exc:
        raise ReportIOError(f"cannot load schema {path}: {exc}")


def validate_report(report, schema_name):
    """
    Check a report against a shipped schema.

    Returns:
        tuple: (is_valid, message)
    """
    try:
        jsonschema.validate(instance=report, schema=load_schema(schema_name))
    except jsonschema.ValidationError as exc:
        return False, f"{schema_name}: {exc.message}"
    return True, "Valid report"


def write_report(report, path, schema_name=None):
    """Validate (when a schema is named) and write a report as UTF-8 JSON."""
    if schema_name:
        is_valid, message = validate_report(report, schema_name)
        if not is_valid:
            raise ValidationError(message)
    try:
        folder = os.path.dirname(path)
        if folder:
            os.makedirs(folder, exist_ok=True)
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(report, handle, indent=2, ensure_ascii=False)
            handle.write("\n")
    except OSError as exc:
        raise ReportIOError(f"cannot write report {path}: {exc}")
    logger.info("wrote %s", path)
    return path


def render_svg(report, path):
    """Line chart of counts (flops report) or seconds (runtime report) against T, log-log."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    if report["kind"] == "flops":
        patches = sorted({p["patches"] for p in report["points"]})
        for n in patches:
            rows = [p for p in report["points"] if p["patches"] == n]
            frames = [p["frames"] for p in rows]
            for variant in VARIANTS:
                ax.plot(frames, [p["counts"][variant]["closed_form"] for p in rows], marker="o",
                        label=f"{variant} N={n}")
        ax.set_ylabel("pair interactions")
    else:
        for variant, seconds in report["seconds"].items():
            ax.plot(report["frames"], seconds, marker="o",
                    label=f"{variant} (slope {report['slopes'][variant]:.2f})")
        ax.set_ylabel("seconds per batch")
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("frames T")
    ax.legend(fontsize=7)
    fig.tight_layout()
    try:
        fig.savefig(path, format="svg")
    except OSError as exc:
        raise ReportIOError(f"cannot write chart {path}: {exc}")
    finally:
        plt.close(fig)
    return path
