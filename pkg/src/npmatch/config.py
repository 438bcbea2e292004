"""Training configuration and its flat INI serialisation."""

import configparser
import dataclasses
import io
from dataclasses import dataclass, fields

from .npmodel import ModelConfig

SECTION = "npmatch"
DIVERGENCE_FORMS = ("kl", "js", "js_dual")


@dataclass
class TrainConfig:
    # batch composition and pseudo-label gates
    B: int = 64
    ratio_mu: int = 7
    tau_c: float = 0.95
    tau_u: float = 0.4
    # loss weights and NP settings
    lambda_u: float = 1.0
    beta: float = 0.01
    T: int = 10
    Q: int = 2560
    divergence: str = "js"
    # optimisation
    ema_momentum: float = 0.999
    lr0: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4
    total_steps: int = 20000
    seed: int = 0
    # model widths
    feature_dim: int = 64
    backbone_hidden: int = 64
    hidden_units: int = 16
    latent_dim: int = 16
    conv_channels: str = "8,16"
    # data
    dataset: str = "two-moons"
    n_samples: int = 1500
    noise: float = 0.1
    n_classes: int = 2
    data_seed: int = 7
    labels_per_class: int = 3
    test_fraction: float = 1.0 / 3.0
    # bookkeeping
    eval_interval: int = 1000
    eval_T: int = 10
    n_bins: int = 15
    checkpoint_interval: int = 0

    def __post_init__(self):
        if not 0.0 < self.tau_c <= 1.0:
            raise ValueError("tau_c must lie in (0, 1]")
        if self.tau_u <= 0.0:
            raise ValueError("tau_u must be positive")
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if self.B < 1 or self.ratio_mu < 0 or self.Q < 1:
            raise ValueError("B, Q must be positive and ratio_mu non-negative")
        if self.divergence not in DIVERGENCE_FORMS:
            raise ValueError(f"divergence must be one of {DIVERGENCE_FORMS}")
        if self.total_steps < 0 or self.eval_interval < 1:
            raise ValueError("total_steps >= 0 and eval_interval >= 1 required")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def model_config(self, n_classes, input_kind, input_dim, image_channels=1):
        return ModelConfig(
            n_classes=n_classes,
            input_kind=input_kind,
            input_dim=input_dim,
            image_channels=image_channels,
            feature_dim=self.feature_dim,
            backbone_hidden=self.backbone_hidden,
            hidden_units=self.hidden_units,
            latent_dim=self.latent_dim,
            conv_channels=tuple(int(c) for c in self.conv_channels.split(",")),
            bank_capacity=self.Q,
        )


_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(name, text):
    kind = _TYPES[name]
    if kind in (int, "int"):
        return int(text)
    if kind in (float, "float"):
        return float(text)
    return text


def serialize(config):
    """INI text, one key per field, floats in round-trip repr."""
    lines = [f"[{SECTION}]"]
    for f in fields(TrainConfig):
        value = getattr(config, f.name)
        text = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


def parse(text):
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    parser.read_file(io.StringIO(text))
    if not parser.has_section(SECTION):
        raise ValueError(f"config needs a [{SECTION}] section")
    values = {}
    for key, raw in parser.items(SECTION):
        if key not in _TYPES:
            raise ValueError(f"unknown config key {key!r}")
        try:
            values[key] = _coerce(key, raw.strip())
        except ValueError as exc:
            raise ValueError(f"bad value for {key}: {raw!r}") from exc
    return TrainConfig(**values)


def override(config, changes):
    """Copy of ``config`` with string values (as in a config file) applied."""
    values = {}
    for key, raw in changes.items():
        if key not in _TYPES:
            raise ValueError(f"unknown config key {key!r}")
        try:
            values[key] = _coerce(key, str(raw).strip())
        except ValueError as exc:
            raise ValueError(f"bad value for {key}: {raw!r}") from exc
    return config.replace(**values)


def load(path):
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read())


def save(config, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize(config))
