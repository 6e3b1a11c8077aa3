"""
Built-in property checks run by the `selftest` command.

Each check returns a CheckResult instead of raising, so one failing property
does not hide the others.
"""
import logging
import math
import time
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as tn
from .alignment import LossConfig, TextBank, ce_loss, score, total_loss
from .encoder import EncoderConfig, EncoderWeights, VideoEncoder
from .mcm import ChannelPlan, MixSpec, Segment, plan_channels
from .training import ToyTrainingConfig
from .wsm import MASK_STRATEGIES, TokenGrid, WindowSpec, build_mask_schedule, visible_count

logger = logging.getLogger(__name__)

FAULTS = ("channel_plan",)
GRADIENT_TOLERANCE = 1e-4
COLLAPSE_TOLERANCE = 1e-10
ORACLE_TOLERANCE = 1e-12


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def to_dict(self):
        return {"name": self.name, "passed": self.passed, "detail": self.detail, "seconds": self.seconds}


def micro_config():
    """Two-frame 4x4 clip with 2x2 patches, two stca blocks."""
    return EncoderConfig(frames=2, height=4, width=4, patch=2, dim=8, layers=2, heads=2,
                         window=WindowSpec(2, 2, 0.5), mix=MixSpec((1, 2), 0.25, "continual", "zero-fill"))


def _perturbed(weights, name, index, step):
    params = dict(weights.params)
    data = params[name].data.copy()
    data[index] += step
    params[name] = tn.Tensor(data, name=name)
    return EncoderWeights(params, weights.heads)


def check_gradients(samples=60, step=1e-5, seed=0):
    """
    Analytic gradient of the full training loss against central finite differences.

    patch embedding, two stca blocks, both alignment scores, cross-entropy and
    distillation are all on the path.
    """
    config = micro_config()
    rng = np.random.default_rng(seed)
    videos = rng.uniform(0.0, 1.0, size=(2, config.frames, config.height, config.width, 3))
    labels = np.array([0, 2])
    bank = TextBank.from_prototypes([rng.standard_normal((n, config.dim)) for n in (2, 3, 1)])
    loss_cfg = LossConfig(lambda_distill=1.0, logit_scale=10.0)
    encoder = VideoEncoder(config)
    frozen = VideoEncoder(config.with_variant("spatial_only"), encoder.weights.frozen()).encode(videos)

    def loss_of(weights):
        z = encoder.with_weights(weights).encode(videos)
        return total_loss(score(z, bank, loss_cfg.logit_scale).overall, labels, z, frozen, loss_cfg)

    with tn.use_dtype(np.float64):
        weights = encoder.weights.trainable()
        with tn.Tape():
            loss = loss_of(weights)
        grads = {leaf.name: g.data for leaf, g in tn.backward(loss).items()}
        worst, where = 0.0, None
        names = weights.names
        for _ in range(samples):
            name = names[int(rng.integers(len(names)))]
            index = tuple(int(rng.integers(n)) for n in weights[name].shape)
            plus = loss_of(_perturbed(weights.frozen(), name, index, step)).item()
            minus = loss_of(_perturbed(weights.frozen(), name, index, -step)).item()
            numeric = (plus - minus) / (2 * step)
            analytic = float(grads[name][index]) if name in grads else 0.0
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-5)
            if err > worst:
                worst, where = err, f"{name}{list(index)}"
    passed = worst < GRADIENT_TOLERANCE
    return passed, f"max relative error {worst:.2e} over {samples} coordinates (worst at {where})"


def collapse_config():
    """Toy encoder with every token retained and self-fill edges."""
    base = ToyTrainingConfig().encoder
    return replace(base, window=replace(base.window, ratio=1.0), mix=replace(base.mix, boundary="self-fill"))


def faulty_plans(config):
    """Channel plans whose first segment reads from the wrong source channels."""
    plans = {}
    for delta in config.mix.scales:
        plan = plan_channels(config.dim, delta, config.mix)
        first = plan.segments[0]
        moved = Segment(first.offset, first.start, first.end, source_start=first.start + 1)
        plans[delta] = ChannelPlan((moved,) + plan.segments[1:], plan.width, plan.delta)
    return plans


def check_collapse(inject_fault=None, seed=0):
    """
    On a time-constant clip, cross-frame mixing must be the identity: the stca
    encoder equals its mixing-bypassed reference at every layer. With the
    window-shifted path switched off, stca must equal the spatial-only variant
    on the same weights for an arbitrary clip.
    """
    config = collapse_config()
    rng = np.random.default_rng(seed)
    frame = rng.uniform(0.0, 1.0, size=(config.height, config.width, 3))
    video = np.broadcast_to(frame, (config.frames,) + frame.shape).copy()
    plans = faulty_plans(config) if inject_fault == "channel_plan" else None
    with tn.use_dtype(np.float64):
        encoder = VideoEncoder(config, plans=plans)
        reference = VideoEncoder(config, encoder.weights, mixing=False)
        mixed_layers = encoder.tokens(video)
        local_layers = reference.tokens(video)
        clip = rng.uniform(0.0, 1.0, size=video.shape)
        static_layers = VideoEncoder(config, encoder.weights, dynamic=False).tokens(clip)
        spatial_layers = VideoEncoder(config.with_variant("spatial_only"), encoder.weights).tokens(clip)
    gap = max(float(np.max(np.abs(a.data - b.data))) for a, b in zip(mixed_layers, local_layers))
    frames_equal = all(np.allclose(z.data, z.data[:1], atol=COLLAPSE_TOLERANCE) for z in mixed_layers)
    variant_gap = max(float(np.max(np.abs(a.data - b.data))) for a, b in zip(static_layers, spatial_layers))
    passed = gap <= COLLAPSE_TOLERANCE and frames_equal and variant_gap <= COLLAPSE_TOLERANCE
    return passed, (f"max gap {gap:.2e} over {config.layers + 1} token layers, identical frames={frames_equal}, "
                    f"spatial-only gap {variant_gap:.2e}")


def check_mask_balance(grid=None, window=None):
    """
    Every shifting strategy retains each cell in exactly r*w1*w2 of any w1*w2
    consecutive frames, repeats with period w1*w2 and keeps N' = r*N cells.
    """
    grid = grid or TokenGrid(4, 4)
    window = window or WindowSpec(2, 2, 0.5)
    keep = window.keep_per_window
    n_prime = visible_count(grid, window)
    frames = 2 * window.cells
    problems = []
    for strategy in MASK_STRATEGIES:
        if strategy == "random":
            continue
        schedule = build_mask_schedule(grid, window, frames, strategy=strategy, seed=0)
        if (schedule.maps.sum(axis=1) != n_prime).any():
            problems.append(f"{strategy}: wrong retained count")
        for start in range(frames - window.cells + 1):
            counts = schedule.maps[start:start + window.cells].sum(axis=0)
            if strategy != "uniform_shift" and (counts != keep).any():
                problems.append(f"{strategy}: unbalanced from frame {start}")
                break
        if schedule.period != window.cells and strategy == "repeat_window_shift":
            problems.append(f"{strategy}: period {schedule.period}")
    if problems:
        return False, "; ".join(problems)
    return True, f"N'={n_prime} of N={grid.n}, each cell kept {keep} of every {window.cells} frames"


def brute_force_scores(z, embeddings, counts, logit_scale):
    """Loop transcription of the frame-to-prompt / prompt-to-frame scores of one video."""
    frames = z.shape[0]
    out = []
    for k, count in enumerate(counts):
        sims = [[float(np.dot(z[t], embeddings[k, j])) for j in range(count)] for t in range(frames)]
        v2t = sum(max(row) for row in sims) / frames
        t2v = sum(max(sims[t][j] for t in range(frames)) for j in range(count)) / count
        out.append(logit_scale * (v2t + t2v) / 2)
    return np.array(out)


def check_alignment_oracle(instances=100, seed=0):
    """Vectorized scores against the loop transcription; CE on flat scores equals ln K."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        classes, frames, dim = int(rng.integers(1, 5)), int(rng.integers(1, 6)), int(rng.integers(2, 9))
        rows = [rng.standard_normal((int(rng.integers(1, 5)), dim)) for _ in range(classes)]
        bank = TextBank.from_prototypes(rows)
        z = rng.standard_normal((frames, dim))
        z /= np.linalg.norm(z, axis=-1, keepdims=True)
        got = score(z, bank, 100.0).overall.data[0]
        want = brute_force_scores(z, bank.embeddings.data, bank.counts, 100.0)
        worst = max(worst, float(np.max(np.abs(got - want)) / 100.0))
    flat_gap = 0.0
    for classes in (2, 3, 7):
        value = ce_loss(tn.Tensor(np.zeros((4, classes))), np.arange(4) % classes).item()
        flat_gap = max(flat_gap, abs(value - math.log(classes)))
    passed = worst <= ORACLE_TOLERANCE and flat_gap <= ORACLE_TOLERANCE
    return passed, f"max score gap {worst:.2e} over {instances} instances, flat CE gap {flat_gap:.2e}"


def run_selftest(inject_fault=None):
    """
    Run every check.

    Args:
        inject_fault (str | None): One of FAULTS to break a property on purpose

    Returns:
        list[CheckResult]
    """
    checks = [
        ("gradients", check_gradients),
        ("collapse", lambda: check_collapse(inject_fault=inject_fault)),
        ("mask_balance", check_mask_balance),
        ("alignment_oracle", check_alignment_oracle),
    ]
    results = []
    for name, check in checks:
        started = time.perf_counter()
        passed, detail = check()
        result = CheckResult(name, bool(passed), detail, time.perf_counter() - started)
        log = logger.info if result.passed else logger.error
        log("%s: %s (%s)", name, "pass" if passed else "FAIL", detail)
        results.append(result)
    return results
