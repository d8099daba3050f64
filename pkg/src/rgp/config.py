"""Flat key=value experiment configuration with CLI overrides."""

import dataclasses

from dataclasses import dataclass

from .errors import ConfigError

__all__ = ["TrainConfig"]


@dataclass
class TrainConfig:
    # data
    format: str = "blobs"            # blobs | csv | idx
    train: str = ""                  # csv path
    test: str = ""
    train_images: str = ""           # idx paths
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    blobs_n: int = 5000
    blobs_test_n: int = 1000
    blobs_std: float = 1.0
    blobs_sep: float = 3.0
    # model
    hidden: tuple = (64,)
    conv_channels: tuple = ()
    kernel_size: int = 3
    conv_stride: int = 1
    conv_padding: int = 0
    input_shape: tuple = ()
    # method
    method: str = "rgp"
    rank: int = 4
    power_iters: int = 1
    warmup_steps: int = 5
    residual: bool = True
    # privacy: exactly one of sigma / epsilon for the private methods (0 = unset)
    clip: float = 1.0
    sigma: float = 0.0
    epsilon: float = 0.0
    delta: float = 1e-5
    # schedule
    batch: int = 64
    sampling: str = "poisson"
    epochs: int = 10
    max_steps: int = 0               # 0 = no cap
    lr: float = 0.1
    momentum: float = 0.9
    seed: int = 0
    # diagnostics
    track_stable_rank: bool = False
    track_residuals: bool = False
    track_every_epochs: int = 1
    dense_check: bool = False

    # ------------------------------------------------------------------
    @staticmethod
    def _coerce(name, default, raw):
        raw = raw.strip()
        kind = type(default)
        try:
            if kind is bool:
                lowered = raw.lower()
                if lowered in ("1", "true", "yes", "on"):
                    return True
                if lowered in ("0", "false", "no", "off"):
                    return False
                raise ValueError(f"not a boolean: {raw!r}")
            if kind is int:
                return int(raw)
            if kind is float:
                return float(raw)
            if kind is tuple:
                if not raw:
                    return ()
                return tuple(int(part) for part in raw.split(","))
            return raw
        except ValueError as exc:
            raise ConfigError(f"bad value for {name}: {exc}") from exc

    @classmethod
    def field_defaults(cls):
        return {f.name: f.default_factory() if f.default_factory is not dataclasses.MISSING
                else f.default for f in dataclasses.fields(cls)}

    @classmethod
    def from_sources(cls, config_path=None, overrides=None):
        """Build a config from an optional file plus raw string overrides."""
        defaults = cls.field_defaults()
        values = dict(defaults)
        if config_path:
            for name, raw in _read_kv_file(config_path):
                if name not in defaults:
                    raise ConfigError(f"unknown config key {name!r} in {config_path}")
                values[name] = cls._coerce(name, defaults[name], raw)
        for name, raw in (overrides or {}).items():
            key = name.replace("-", "_")
            if key not in defaults:
                raise ConfigError(f"unknown config key {name!r}")
            values[key] = cls._coerce(key, defaults[key], raw)
        cfg = cls(**values)
        cfg.validate()
        return cfg

    def validate(self):
        if self.format not in ("blobs", "csv", "idx"):
            raise ConfigError(f"unknown dataset format {self.format!r}")
        if self.format == "csv" and not (self.train and self.test):
            raise ConfigError("csv format requires train= and test= paths")
        if self.format == "idx" and not (self.train_images and self.train_labels
                                         and self.test_images and self.test_labels):
            raise ConfigError("idx format requires the four *_images/*_labels paths")
        if self.method in ("rgp", "rgp-random", "dpsgd"):
            if (self.sigma > 0) == (self.epsilon > 0):
                raise ConfigError("set exactly one of sigma and epsilon for private methods")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.sampling not in ("poisson", "fixed"):
            raise ConfigError("sampling must be 'poisson' or 'fixed'")

    def resolved(self):
        """JSON-serializable view of every field (for the metrics header)."""
        out = dataclasses.asdict(self)
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = list(value)
        return out


def _read_kv_file(path):
    pairs = []
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value")
                name, _, raw = line.partition("=")
                pairs.append((name.strip(), raw))
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return pairs
