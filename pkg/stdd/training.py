"""
Toy training on synthetic classes.

Plain gradient descent of the stca encoder on cross-entropy over the
alignment scores plus feature distillation towards a frozen spatial-only
twin, with text banks built from the shipped synthetic prompt fixtures.
"""
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as tn
from .alignment import LossConfig, TextBank, ce_loss, distill_loss, score, total_loss
from .askg import ASKGBuilder
from .encoder import EncoderConfig, VideoEncoder
from .llm_client import SYNTHETIC_FIXTURE_DIR, FixtureClient
from .mcm import MixSpec
from .prompt_bank import HashingTextEmbedder, triples_to_prompts
from .video import SYNTHETIC_CLASSES, synthetic_video
from .wsm import WindowSpec

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ToyTrainingConfig:
    """
    Reduced encoder and optimizer settings for desk-scale training runs.

    `seed` picks the synthetic videos and, unless `init_seed` is set, the initial weights.
    """
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(
        frames=4, height=16, width=16, patch=8, dim=16, layers=1, heads=2,
        window=WindowSpec(2, 2, 0.5), mix=MixSpec((1, 2), 0.125, "continual", "zero-fill")))
    loss: LossConfig = field(default_factory=lambda: LossConfig(lambda_distill=0.1, logit_scale=10.0))
    learning_rate: float = 0.05
    steps: int = 50
    videos_per_class: int = 8
    seed: int = 0
    init_seed: int = None
    classes: tuple = SYNTHETIC_CLASSES


@dataclass
class TrainingReport:
    seed: int
    init_seed: int = 0
    losses: list = field(default_factory=list)
    ce_losses: list = field(default_factory=list)
    distill_losses: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def initial_ce(self):
        return self.ce_losses[0]

    @property
    def final_ce(self):
        return self.ce_losses[-1]

    @property
    def reduction(self):
        return 1.0 - self.final_ce / self.initial_ce

    def to_dict(self):
        return {"seed": self.seed, "init_seed": self.init_seed, "losses": self.losses, "ce_losses": self.ce_losses,
                "distill_losses": self.distill_losses, "initial_ce": self.initial_ce,
                "final_ce": self.final_ce, "reduction": self.reduction, "seconds": self.seconds}


def synthetic_dataset(config):
    """
    Returns:
        tuple[np.ndarray, np.ndarray]: videos [B, T, H, W, 3] and labels [B]
    """
    enc = config.encoder
    videos, labels = [], []
    for label, name in enumerate(config.classes):
        for i in range(config.videos_per_class):
            seed = config.seed * 1000 + label * 100 + i
            videos.append(synthetic_video(name, enc.frames, enc.height, enc.width, seed=seed))
            labels.append(label)
    return np.stack(videos), np.asarray(labels)


def synthetic_text_bank(classes, dim, fixtures=None, seed=0):
    """Prompt banks of the synthetic classes from the fixture responses, embedded by hashing."""
    builder = ASKGBuilder(FixtureClient(fixtures or SYNTHETIC_FIXTURE_DIR), store=None, k=5)
    banks = []
    for name in classes:
        subgraph, clauses, _ = builder.build(name)
        banks.append(triples_to_prompts(subgraph, clauses))
    return TextBank.from_prompt_banks(banks, HashingTextEmbedder(dim, seed=seed)), banks


def train_toy(config=None, text_bank=None):
    """
    Run plain gradient descent on `total_loss` and record the loss of every step.

    The frozen twin is the spatial-only variant holding a snapshot of the
    initial weights; its features are computed once and never differentiated.
    """
    config = config or ToyTrainingConfig()
    started = time.perf_counter()
    init_seed = config.seed if config.init_seed is None else config.init_seed
    enc_cfg = replace(config.encoder, init_seed=init_seed)
    videos, labels = synthetic_dataset(config)
    bank = text_bank or synthetic_text_bank(config.classes, enc_cfg.dim)[0]
    encoder = VideoEncoder(enc_cfg)
    frozen = VideoEncoder(enc_cfg.with_variant("spatial_only"), encoder.weights.frozen())
    z_frozen = frozen.encode(videos)
    weights = encoder.weights.trainable()
    report = TrainingReport(seed=config.seed, init_seed=init_seed)
    for step in range(config.steps + 1):
        with tn.Tape():
            z = encoder.with_weights(weights).encode(videos)
            scores = score(z, bank, config.loss.logit_scale).overall
            loss = total_loss(scores, labels, z, z_frozen, config.loss)
        # parts of the loss, for the report only
        report.losses.append(loss.item())
        report.ce_losses.append(ce_loss(scores, labels).item())
        report.distill_losses.append(distill_loss(z, z_frozen).item())
        if step == config.steps:
            break
        weights = weights.updated(tn.backward(loss), config.learning_rate)
        logger.debug("step %d: loss %.6f ce %.6f", step, report.losses[-1], report.ce_losses[-1])
    report.seconds = time.perf_counter() - started
    logger.info("seed %d (init %d): ce %.4f -> %.4f (%.0f%% lower) in %.1fs", config.seed, init_seed,
                report.initial_ce, report.final_ce, 100 * report.reduction, report.seconds)
    return report
