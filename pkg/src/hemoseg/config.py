"""Flat key = value run configuration shared by every command.

File grammar: one ``key = value`` pair per line, ``#`` starts a comment,
blank lines ignored, later assignments win.  Values are plain strings until
a typed getter parses them; tuples use commas (``patch = 8,32,32``) and a
per-level list of factor triples uses semicolons between triples
(``factors = 1,2,2; 2,2,2; 2,2,2``).

Recognized keys (all optional; defaults reproduce the toy setup):

    model.levels / model.channels / model.factors / model.patch /
    model.in_channels / model.out_channels / model.deep_supervision
    stage2.levels / stage2.channels / ... (same scheme for the refiner)
    cascade.roi_margin            three fractions, e.g. 0.25,0.25,0.25
    train.epochs / train.steps_per_epoch / train.batch_size / train.patch /
    train.seed / train.lr / train.eta_min / train.t_0 / train.t_mult /
    train.weight_decay / train.jitter
    phantom.shape / phantom.spacing / phantom.lesion_count /
    phantom.semi_axes_mm / phantom.lesion_hu / phantom.background_hu /
    phantom.noise_sigma_hu
    infer.stride                  three ints, sliding-window step
"""
from __future__ import annotations

from pathlib import Path

from .model import CascadeConfig, UNet3DConfig, toy_cascade_config
from .phantoms import PhantomSpec
from .training import TrainConfig


class ConfigFileError(ValueError):
    pass


def parse_settings(text: str, source: str = "<string>") -> dict[str, str]:
    settings: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigFileError(f"{source}:{lineno}: empty key")
        settings[key] = value.strip()
    return settings


def load_settings(path) -> dict[str, str]:
    path = Path(path)
    return parse_settings(path.read_text(), source=str(path))


def apply_overrides(settings: dict[str, str], overrides) -> dict[str, str]:
    """Apply ``key=value`` strings (CLI --set) on top of file settings."""
    merged = dict(settings)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigFileError(f"override {item!r} must look like key=value")
        key, value = item.split("=", 1)
        merged[key.strip()] = value.strip()
    return merged


def _get(settings, key, default, convert):
    raw = settings.get(key)
    if raw is None:
        return default
    try:
        return convert(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigFileError(f"bad value for {key}: {raw!r} ({exc})") from exc


def get_int(settings, key, default):
    return _get(settings, key, default, int)


def get_float(settings, key, default):
    return _get(settings, key, default, float)


def get_str(settings, key, default):
    return _get(settings, key, default, str)


def get_int_tuple(settings, key, default):
    return _get(settings, key, default, lambda s: tuple(int(v) for v in s.split(",")))


def get_float_tuple(settings, key, default):
    return _get(settings, key, default, lambda s: tuple(float(v) for v in s.split(",")))


def get_factor_list(settings, key, default):
    def convert(s):
        return tuple(tuple(int(v) for v in triple.split(",")) for triple in s.split(";") if triple.strip())

    return _get(settings, key, default, convert)


def model_config_from(settings: dict[str, str], prefix: str, default: UNet3DConfig) -> UNet3DConfig:
    """One network's architecture from ``<prefix>.*`` keys over a default."""
    p = prefix + "."
    cfg = UNet3DConfig(
        levels=get_int(settings, p + "levels", default.levels),
        channels_per_level=get_int_tuple(settings, p + "channels", default.channels_per_level),
        downsample_factors_per_level=get_factor_list(settings, p + "factors", default.downsample_factors_per_level),
        input_patch_shape=get_int_tuple(settings, p + "patch", default.input_patch_shape),
        in_channels=get_int(settings, p + "in_channels", default.in_channels),
        out_channels=get_int(settings, p + "out_channels", default.out_channels),
        deep_supervision_levels=frozenset(
            get_int_tuple(settings, p + "deep_supervision", tuple(default.deep_supervision_levels))
        ),
    )
    cfg.validate()
    return cfg


def cascade_config_from(settings: dict[str, str]) -> CascadeConfig:
    base = toy_cascade_config()
    stage2 = model_config_from(settings, "stage2", base.stage2)
    cfg = CascadeConfig(
        stage1=model_config_from(settings, "model", base.stage1),
        stage2=stage2,
        stage2_input_shape=tuple(stage2.input_patch_shape),
        roi_margin_fraction=get_float_tuple(settings, "cascade.roi_margin", base.roi_margin_fraction),
    )
    cfg.validate()
    return cfg


def train_config_from(settings: dict[str, str], **overrides) -> TrainConfig:
    base = TrainConfig()
    cfg = TrainConfig(
        epochs=get_int(settings, "train.epochs", base.epochs),
        steps_per_epoch=get_int(settings, "train.steps_per_epoch", base.steps_per_epoch),
        batch_size=get_int(settings, "train.batch_size", base.batch_size),
        patch_shape=get_int_tuple(settings, "train.patch", base.patch_shape),
        seed=get_int(settings, "train.seed", base.seed),
        lr=get_float(settings, "train.lr", base.lr),
        eta_min=get_float(settings, "train.eta_min", base.eta_min),
        t_0=get_int(settings, "train.t_0", base.t_0),
        t_mult=get_int(settings, "train.t_mult", base.t_mult),
        weight_decay=get_float(settings, "train.weight_decay", base.weight_decay),
        jitter_fraction=get_float(settings, "train.jitter", base.jitter_fraction),
    )
    for key, value in overrides.items():
        setattr(cfg, key, value)
    cfg.validate()
    return cfg


def phantom_spec_from(settings: dict[str, str], seed: int | None = None) -> PhantomSpec:
    base = PhantomSpec()
    spec = PhantomSpec(
        shape=get_int_tuple(settings, "phantom.shape", base.shape),
        spacing_mm=get_float_tuple(settings, "phantom.spacing", base.spacing_mm),
        lesion_count_range=get_int_tuple(settings, "phantom.lesion_count", base.lesion_count_range),
        semi_axes_mm_range=get_float_tuple(settings, "phantom.semi_axes_mm", base.semi_axes_mm_range),
        lesion_hu_range=get_float_tuple(settings, "phantom.lesion_hu", base.lesion_hu_range),
        background_hu=get_float(settings, "phantom.background_hu", base.background_hu),
        noise_sigma_hu=get_float(settings, "phantom.noise_sigma_hu", base.noise_sigma_hu),
        seed=base.seed if seed is None else int(seed),
    )
    spec.validate()
    return spec
