"""Pipeline configuration: one human-editable INI file, strictly validated.

Unknown sections or keys are hard errors so typos cannot silently change a
run. ``parse -> serialize -> parse`` round-trips to an identical config.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field
from pathlib import Path

from .discovery import DiscoveryConfig
from .embedding import LossConfig
from .errors import ConfigurationError
from .signal import SynthClassProfile

PROFILE_PREFIX = "profile:"
PROFILE_ROLES = ("known", "unknown")


@dataclass(frozen=True)
class SignalSettings:
    sample_rate: float = 64000.0
    duration: float = 0.016
    snr_db: tuple[float, ...] = (20.0,)
    fft_size: int = 64
    frame_hop: int = 64
    window: str = "hann"
    train_per_class: int = 300
    eval_per_class: int = 60
    stream_per_class: int = 300

    @property
    def record_samples(self) -> int:
        return int(round(self.duration * self.sample_rate))

    @property
    def spectrogram_shape(self) -> tuple[int, int]:
        n_frames = (self.record_samples - self.fft_size) // self.frame_hop + 1
        return n_frames, self.fft_size // 2 + 1


@dataclass(frozen=True)
class EncoderSettings:
    hidden_widths: tuple[int, ...] = (256, 128)
    embed_dim: int = 64
    activation: str = "relu"
    epochs: int = 40
    warmup_epochs: int = 3
    batch_size: int = 64
    learning_rate: float = 1e-4


@dataclass(frozen=True)
class OpensetSettings:
    shrinkage: float = 0.1


@dataclass(frozen=True)
class IncrementalSettings:
    n_min: float = 100.0
    old_max: int = 5
    new_max: int = 60
    memory_capacity: int = 1000
    step_cap: float = 10000.0
    finetune_epochs: int = 30
    finetune_lr: float = 1e-4
    plateau_tol: float = 1e-4
    plateau_epochs: int = 5
    min_refit_samples: int = 0


@dataclass(frozen=True)
class ProfileEntry:
    profile: SynthClassProfile
    role: str   # "known" or "unknown"


@dataclass(frozen=True)
class PipelineConfig:
    root_seed: int = 0
    signal: SignalSettings = field(default_factory=SignalSettings)
    encoder: EncoderSettings = field(default_factory=EncoderSettings)
    loss: LossConfig = field(default_factory=LossConfig)
    openset: OpensetSettings = field(default_factory=OpensetSettings)
    discovery: DiscoveryConfig = field(default_factory=DiscoveryConfig)
    incremental: IncrementalSettings = field(default_factory=IncrementalSettings)
    profiles: tuple[ProfileEntry, ...] = ()

    def known_profiles(self) -> list[SynthClassProfile]:
        return [p.profile for p in self.profiles if p.role == "known"]

    def unknown_profiles(self) -> list[SynthClassProfile]:
        return [p.profile for p in self.profiles if p.role == "unknown"]


# ---------------------------------------------------------------------------
# Field tables: (ini key, dataclass attribute, converter)

def _float_tuple(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip() != "")


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip() != "")


_SECTION_FIELDS: dict[str, list[tuple[str, str, object]]] = {
    "run": [("root_seed", "root_seed", int)],
    "signal": [
        ("sample_rate", "sample_rate", float),
        ("duration", "duration", float),
        ("snr_db", "snr_db", _float_tuple),
        ("fft_size", "fft_size", int),
        ("frame_hop", "frame_hop", int),
        ("window", "window", str),
        ("train_per_class", "train_per_class", int),
        ("eval_per_class", "eval_per_class", int),
        ("stream_per_class", "stream_per_class", int),
    ],
    "encoder": [
        ("hidden_widths", "hidden_widths", _int_tuple),
        ("embed_dim", "embed_dim", int),
        ("activation", "activation", str),
        ("epochs", "epochs", int),
        ("warmup_epochs", "warmup_epochs", int),
        ("batch_size", "batch_size", int),
        ("learning_rate", "learning_rate", float),
    ],
    "loss": [
        ("eta1", "eta_center", float),
        ("eta2", "eta_separation", float),
        ("eta3", "eta_cross_entropy", float),
        ("margin", "margin", float),
    ],
    "openset": [("shrinkage", "shrinkage", float)],
    "discovery": [
        ("k_max", "k_max", int),
        ("pca_threshold_dim", "pca_threshold_dim", int),
        ("elbow_tolerance", "elbow_tolerance", float),
        ("purity_threshold", "purity_threshold", float),
        ("min_cluster_size", "min_cluster_size", int),
        ("max_cluster_size", "max_cluster_size", int),
        ("em_max_iters", "em_max_iters", int),
        ("em_tol", "em_tol", float),
        ("kmeans_restarts", "kmeans_restarts", int),
        ("kmeans_max_iters", "kmeans_max_iters", int),
        ("q_floor", "q_floor", float),
    ],
    "incremental": [
        ("n_min", "n_min", float),
        ("old_max", "old_max", int),
        ("new_max", "new_max", int),
        ("memory_capacity", "memory_capacity", int),
        ("step_cap", "step_cap", float),
        ("finetune_epochs", "finetune_epochs", int),
        ("finetune_lr", "finetune_lr", float),
        ("plateau_tol", "plateau_tol", float),
        ("plateau_epochs", "plateau_epochs", int),
        ("min_refit_samples", "min_refit_samples", int),
    ],
}

_PROFILE_FIELDS: list[tuple[str, str, object]] = [
    ("role", "role", str),
    ("tones", "tone_set", _float_tuple),
    ("hop_period", "hop_period", float),
    ("bandwidth", "bandwidth", float),
    ("burst_duty", "burst_duty", float),
    ("am_depth", "am_depth", float),
]

_SECTION_TYPES = {
    "signal": SignalSettings,
    "encoder": EncoderSettings,
    "loss": LossConfig,
    "openset": OpensetSettings,
    "discovery": DiscoveryConfig,
    "incremental": IncrementalSettings,
}


def _parse_section(parser: configparser.ConfigParser, section: str) -> dict:
    table = _SECTION_FIELDS[section]
    known_keys = {key for key, _, _ in table}
    values: dict[str, object] = {}
    if not parser.has_section(section):
        return values
    for key in parser[section]:
        if key not in known_keys:
            raise ConfigurationError(f"unknown key {key!r} in section [{section}]")
    for key, attr, conv in table:
        if parser.has_option(section, key):
            raw = parser.get(section, key)
            try:
                values[attr] = conv(raw)
            except ValueError as exc:
                raise ConfigurationError(
                    f"[{section}] {key} = {raw!r}: {exc}"
                ) from exc
    return values


def parse_config(text: str) -> PipelineConfig:
    parser = configparser.ConfigParser(
        interpolation=None, strict=True, inline_comment_prefixes=(";", "#")
    )
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"config parse error: {exc}") from exc

    profile_entries: list[ProfileEntry] = []
    for section in parser.sections():
        if section in _SECTION_FIELDS:
            continue
        if not section.startswith(PROFILE_PREFIX):
            raise ConfigurationError(f"unknown section [{section}]")
        class_id = section[len(PROFILE_PREFIX):]
        values: dict[str, object] = {}
        known_keys = {key for key, _, _ in _PROFILE_FIELDS}
        for key in parser[section]:
            if key not in known_keys:
                raise ConfigurationError(f"unknown key {key!r} in section [{section}]")
        for key, attr, conv in _PROFILE_FIELDS:
            if parser.has_option(section, key):
                raw = parser.get(section, key)
                try:
                    values[attr] = conv(raw)
                except ValueError as exc:
                    raise ConfigurationError(
                        f"[{section}] {key} = {raw!r}: {exc}"
                    ) from exc
        role = values.pop("role", "known")
        if role not in PROFILE_ROLES:
            raise ConfigurationError(
                f"[{section}] role must be one of {PROFILE_ROLES}, got {role!r}"
            )
        if "tone_set" not in values:
            raise ConfigurationError(f"[{section}] must define tones")
        try:
            profile = SynthClassProfile(class_id=class_id, **values)
            profile.validate()
        except ConfigurationError:
            raise
        profile_entries.append(ProfileEntry(profile=profile, role=role))

    run_values = _parse_section(parser, "run")
    kwargs: dict[str, object] = {"root_seed": run_values.get("root_seed", 0)}
    for section, cls in _SECTION_TYPES.items():
        try:
            kwargs[section] = cls(**_parse_section(parser, section))
        except ConfigurationError:
            raise
        except Exception as exc:
            raise ConfigurationError(f"invalid [{section}] settings: {exc}") from exc

    config = PipelineConfig(profiles=tuple(profile_entries), **kwargs)
    validate_config(config)
    return config


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    return parse_config(path.read_text())


def validate_config(config: PipelineConfig) -> None:
    sig = config.signal
    if sig.record_samples < sig.fft_size:
        raise ConfigurationError(
            f"duration {sig.duration}s gives {sig.record_samples} samples, "
            f"shorter than fft_size {sig.fft_size}"
        )
    seen_ids = set()
    signatures = {}
    for entry in config.profiles:
        profile = entry.profile
        profile.validate(sig.sample_rate)
        if profile.class_id in seen_ids:
            raise ConfigurationError(f"duplicate profile class id {profile.class_id!r}")
        seen_ids.add(profile.class_id)
        key = (
            profile.tone_set,
            profile.hop_period,
            profile.bandwidth,
            profile.burst_duty,
            profile.am_depth,
        )
        if key in signatures:
            raise ConfigurationError(
                f"profiles {signatures[key]!r} and {profile.class_id!r} are "
                "identical in every signal parameter"
            )
        signatures[key] = profile.class_id


def _format_value(value: object) -> str:
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(config: PipelineConfig) -> str:
    """Canonical INI text; parsing it reproduces the config exactly."""
    out = io.StringIO()
    out.write("[run]\n")
    out.write(f"root_seed = {config.root_seed}\n\n")
    for section in _SECTION_TYPES:
        obj = getattr(config, section)
        out.write(f"[{section}]\n")
        for key, attr, _ in _SECTION_FIELDS[section]:
            out.write(f"{key} = {_format_value(getattr(obj, attr))}\n")
        out.write("\n")
    for entry in config.profiles:
        out.write(f"[{PROFILE_PREFIX}{entry.profile.class_id}]\n")
        out.write(f"role = {entry.role}\n")
        for key, attr, _ in _PROFILE_FIELDS[1:]:
            out.write(f"{key} = {_format_value(getattr(entry.profile, attr))}\n")
        out.write("\n")
    return out.getvalue()


def write_config(config: PipelineConfig, path: str | Path) -> None:
    Path(path).write_text(serialize_config(config))
