"""
Run configuration.

A flat set of named settings read from a plain-text `key = value` file and
`--set key=value` overrides, from which every module's own small config is
derived.
"""
import dataclasses
import logging
from dataclasses import dataclass

from .alignment import LossConfig
from .encoder import EncoderConfig
from .errors import ConfigurationError, STDDError
from .mcm import MixSpec
from .wsm import WindowSpec

logger = logging.getLogger(__name__)


@dataclass
class RunConfig:
    """
    Every tunable of a run. Defaults follow the standard setup: 8 frames,
    2x2 windows keeping half the tokens, temporal scales 1 and 2, three
    temporal views and one spatial view per video.
    """
    frames: int = 8
    height: int = 32
    width: int = 32
    patch: int = 8
    channels: int = 64
    layers: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    ln_eps: float = 1e-5
    variant: str = "stca"
    window_h: int = 2
    window_w: int = 2
    mask_ratio: float = 0.5
    mask_strategy: str = "repeat_window_shift"
    mask_seed: int = 0
    scales: tuple = (1, 2)
    gamma: float = 0.125
    mix_mode: str = "continual"
    boundary: str = "zero-fill"
    lambda_distill: float = 1.0
    logit_scale: float = 100.0
    seed: int = 0
    temporal_views: int = 3
    spatial_views: int = 1
    output_dir: str = "out"
    weights_path: str = ""
    text_bank_path: str = ""
    dtype: str = "float64"
    bench_frames: tuple = (4, 8, 16, 32)
    bench_patches: tuple = (16, 64)
    bench_repeats: int = 5
    bench_batch: int = 32
    learning_rate: float = 0.05
    train_steps: int = 50
    videos_per_class: int = 8
    threads: int = 1

    @classmethod
    def field_names(cls):
        return [f.name for f in dataclasses.fields(cls)]

    def set_value(self, key, raw):
        """
        Assign one setting from its text form.

        Raises:
            ConfigurationError: For unknown keys or values of the wrong type
        """
        fields = {f.name: f for f in dataclasses.fields(self)}
        if key not in fields:
            raise ConfigurationError(f"unknown setting '{key}'", key=key)
        current = getattr(self, key)
        try:
            if isinstance(current, tuple):
                value = tuple(int(part) for part in str(raw).replace(" ", "").split(",") if part)
            elif isinstance(current, bool):
                value = str(raw).strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(current, int):
                value = int(str(raw).strip())
            elif isinstance(current, float):
                value = float(str(raw).strip())
            else:
                value = str(raw).strip()
        except ValueError:
            raise ConfigurationError(f"cannot read '{raw}' as {type(current).__name__}", key=key)
        setattr(self, key, value)

    def apply_overrides(self, overrides):
        """Apply `key=value` strings in order."""
        for item in overrides or []:
            if "=" not in item:
                raise ConfigurationError(f"override '{item}' is not key=value", key=item)
            key, raw = item.split("=", 1)
            self.set_value(key.strip(), raw)
        return self

    @classmethod
    def from_file(cls, path, overrides=None):
        """
        Read a `key = value` file; blank lines and text after `#` are ignored.

        Raises:
            ConfigurationError: On malformed lines or unknown keys
            OSError: If the file cannot be read
        """
        config = cls()
        with open(path, encoding="utf-8") as handle:
            for number, line in enumerate(handle, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigurationError(f"{path}:{number}: expected key = value", key=line)
                key, raw = line.split("=", 1)
                config.set_value(key.strip(), raw)
        return config.apply_overrides(overrides)

    def to_text(self):
        lines = []
        for name in self.field_names():
            value = getattr(self, name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{name} = {value}")
        return "\n".join(lines) + "\n"

    def window_spec(self):
        return WindowSpec(self.window_h, self.window_w, self.mask_ratio)

    def mix_spec(self):
        return MixSpec(tuple(self.scales), self.gamma, self.mix_mode, self.boundary)

    def loss_config(self):
        return LossConfig(self.lambda_distill, self.logit_scale)

    def encoder_config(self, **changes):
        config = EncoderConfig(
            frames=self.frames, height=self.height, width=self.width, patch=self.patch,
            dim=self.channels, layers=self.layers, heads=self.heads,
            window=self.window_spec(), mix=self.mix_spec(), variant=self.variant,
            mask_strategy=self.mask_strategy, mask_seed=self.mask_seed,
            mlp_ratio=self.mlp_ratio, ln_eps=self.ln_eps, init_seed=self.seed)
        return dataclasses.replace(config, **changes) if changes else config

    def is_valid(self):
        """
        Check every derived config.

        Returns:
            tuple: (is_valid, messages); messages name the offending keys
        """
        messages = []
        if self.dtype not in ("float64", "float32"):
            messages.append(f"dtype: expected float64 or float32, got {self.dtype}")
        if self.temporal_views < 1 or self.spatial_views < 1:
            messages.append("temporal_views / spatial_views must be positive")
        try:
            self.encoder_config().validate()
            if self.variant != "stca":
                self.window_spec().validate(self.encoder_config().grid)
                self.mix_spec().validate(self.channels)
        except ConfigurationError as exc:
            messages.append(str(exc))
        try:
            self.loss_config()
        except STDDError as exc:
            messages.append(f"loss: {exc}")
        if messages:
            return False, messages
        return True, ["Valid configuration"]

    def validate(self):
        """Raise the first configuration problem, naming its key."""
        self.encoder_config().validate()
        self.window_spec().validate(self.encoder_config().grid)
        self.mix_spec().validate(self.channels)
        self.loss_config()
        if self.dtype not in ("float64", "float32"):
            raise ConfigurationError(f"expected float64 or float32, got {self.dtype}", key="dtype")
        return self
