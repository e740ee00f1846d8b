"""Pipeline configuration: one TOML document covering every stage.

Sections mirror the stages (``signal``, ``ssa``, ``features``, ``cnn``,
``eval``, ``synth``).  Values may be overridden from the environment with
``SSAEEG_<SECTION>__<KEY>=value`` (e.g. ``SSAEEG_CNN__EPOCHS=10``).
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import tomli_w

from .errors import ConfigError

ENV_PREFIX = "SSAEEG_"


@dataclass(frozen=True)
class SignalConfig:
    fs: float = 500.0
    band_low_hz: float = 0.5
    band_high_hz: float = 40.0
    filter_order: int = 4
    segment_seconds: float = 40.0
    overlap: float = 0.0


@dataclass(frozen=True)
class SsaSection:
    window_length: int = 70
    # leading eigentriples kept for grouping; ~2*L*(band width)/fs spans the
    # 0.5-40 Hz signal subspace at L=70, fs=500
    n_components: int = 12
    groups: int = 5
    # "subject": one consensus grouping per subject from channel-averaged |w-corr|;
    # "channel": every channel/segment grouped from its own w-correlation
    grouping: str = "subject"


@dataclass(frozen=True)
class FeatureSection:
    nfft: int = 0  # 0 -> next power of two >= segment length
    band_low_hz: float = 0.5
    band_high_hz: float = 40.0
    per_segment: bool = False
    log_power: bool = False


@dataclass(frozen=True)
class CnnSection:
    lr: float = 1e-3
    epochs: int = 60
    batch: int = 8
    dropout: float = 0.5
    dense_units: int = 32
    filters: tuple[int, ...] = (8, 16, 32)


@dataclass(frozen=True)
class EvalSection:
    folds: int = 4
    members: int = 4
    seed: int = 0
    sweep_min: int = 1
    sweep_max: int = 5


@dataclass(frozen=True)
class SynthSection:
    preset: str = "easy"
    n_per_class: int = 16
    channels: int = 16
    duration_s: float = 80.0
    seed: int = 0


@dataclass(frozen=True)
class PipelineConfig:
    signal: SignalConfig = field(default_factory=SignalConfig)
    ssa: SsaSection = field(default_factory=SsaSection)
    features: FeatureSection = field(default_factory=FeatureSection)
    cnn: CnnSection = field(default_factory=CnnSection)
    eval: EvalSection = field(default_factory=EvalSection)
    synth: SynthSection = field(default_factory=SynthSection)

    @property
    def segment_samples(self) -> int:
        return int(round(self.signal.segment_seconds * self.signal.fs))

    def validate(self) -> "PipelineConfig":
        s, a, f, c, e = self.signal, self.ssa, self.features, self.cnn, self.eval
        problems = []
        if s.fs <= 0:
            problems.append("signal.fs must be positive")
        if not 0 < s.band_low_hz < s.band_high_hz < s.fs / 2:
            problems.append("need 0 < signal.band_low_hz < signal.band_high_hz < fs/2")
        if s.filter_order < 1:
            problems.append("signal.filter_order must be >= 1")
        if not 0 <= s.overlap < 1:
            problems.append("signal.overlap must be in [0, 1)")
        if a.window_length < 2 or 2 * a.window_length > self.segment_samples:
            problems.append("need 2 <= ssa.window_length and 2L <= segment samples")
        if not 1 <= a.n_components <= a.window_length:
            problems.append("need 1 <= ssa.n_components <= ssa.window_length")
        if not 1 <= a.groups <= a.n_components:
            problems.append("need 1 <= ssa.groups <= ssa.n_components")
        if a.grouping not in ("subject", "channel"):
            problems.append("ssa.grouping must be 'subject' or 'channel'")
        if f.nfft and f.nfft < self.segment_samples:
            problems.append("features.nfft must be 0 or >= segment samples")
        if not 0 <= f.band_low_hz < f.band_high_hz <= s.fs / 2:
            problems.append("need 0 <= features.band_low_hz < features.band_high_hz <= fs/2")
        if c.lr < 0 or c.epochs < 0 or c.batch < 1:
            problems.append("cnn.lr/epochs must be >= 0 and cnn.batch >= 1")
        if not 0 <= c.dropout < 1:
            problems.append("cnn.dropout must be in [0, 1)")
        if e.folds < 2:
            problems.append("eval.folds must be >= 2")
        if not 1 <= e.members <= a.groups:
            problems.append("need 1 <= eval.members <= ssa.groups")
        if not 1 <= e.sweep_min <= e.sweep_max <= a.groups:
            problems.append("need 1 <= eval.sweep_min <= eval.sweep_max <= ssa.groups")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cnn"]["filters"] = list(d["cnn"]["filters"])
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_toml())
        return path

    def with_updates(self, **sections) -> "PipelineConfig":
        """Return a copy with ``section={key: value}`` overrides applied."""
        return from_dict(_merge(self.to_dict(), sections))


def _merge(base: dict, over: dict) -> dict:
    out = {k: dict(v) for k, v in base.items()}
    for sec, vals in over.items():
        if sec not in out:
            raise ConfigError(f"unknown config section {sec!r}")
        out[sec].update(vals)
    return out


def _coerce(cls, section: str, values: dict):
    known = {f.name: f for f in fields(cls)}
    defaults = cls()
    kwargs = {}
    for key, val in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {section}.{key}")
        ref = getattr(defaults, key)
        try:
            if isinstance(ref, bool):
                if isinstance(val, str):
                    val = val.strip().lower() in ("1", "true", "yes", "on")
                val = bool(val)
            elif isinstance(ref, int):
                if isinstance(val, float) and not val.is_integer():
                    raise ValueError("expected an integer")
                val = int(val)
            elif isinstance(ref, float):
                val = float(val)
            elif isinstance(ref, tuple):
                if isinstance(val, str):
                    val = [int(v) for v in val.split(",") if v.strip()]
                val = tuple(int(v) for v in val)
            elif isinstance(ref, str):
                val = str(val)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{section}.{key}: {exc}") from None
        kwargs[key] = val
    return replace(defaults, **kwargs)


def from_dict(doc: dict) -> PipelineConfig:
    sections = {f.name: f.type for f in fields(PipelineConfig)}
    kwargs = {}
    for name, values in doc.items():
        if name not in sections:
            raise ConfigError(f"unknown config section {name!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"section {name!r} must be a table")
        cls = type(getattr(PipelineConfig(), name))
        kwargs[name] = _coerce(cls, name, values)
    return PipelineConfig(**kwargs).validate()


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key, val in environ.items():
        if not key.startswith(ENV_PREFIX) or "__" not in key:
            continue
        section, _, name = key[len(ENV_PREFIX):].lower().partition("__")
        out.setdefault(section, {})[name] = val
    return out


def load_config(path=None, environ=None) -> PipelineConfig:
    doc: dict = {}
    if path is not None:
        path = Path(path)
        try:
            doc = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    base = from_dict(doc).to_dict() if doc else PipelineConfig().to_dict()
    return from_dict(_merge(base, env_overrides(environ)))
