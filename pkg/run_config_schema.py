"""
Run configuration file: schema, parser and validator.

INI grammar, read with configparser:

    # comment
    [section]
    key = value

Sections are ``network``, ``scene`` and ``train``. Sequences are written
comma-separated (``image_size = 32, 32``). Unknown sections and keys are
rejected. Every resolved value is echoed into the run's output directory.
"""
import configparser
import logging
from pathlib import Path

from errors import ConfigError, StorageError
from rain_model import BINS_BY_LABEL
from datagen import DEFAULT_ORIENTATIONS, RainSceneSpec, default_bin_settings
from smrnet import NetworkConfig
from trainer import TrainingConfig

logger = logging.getLogger(__name__)

RUN_CONFIG_NAME = 'run_config.ini'

# section -> key -> {type, default, description}
RUN_CONFIG_SCHEMA = {
    "network": {
        "scale_bins": {"type": "int", "default": 3, "min": 0,
                       "description": "Parallel recurrent sub-networks, one per streak scale (0: direct baseline)"},
        "recurrent_iters": {"type": "int", "default": 4, "min": 1,
                            "description": "Iterations of each recurrent sub-network"},
        "stages": {"type": "int", "default": 2, "min": 1, "description": "Refinement stages"},
        "feature_channels": {"type": "int", "default": 16, "min": 1, "description": "Stem output channels"},
        "dense_layers": {"type": "int", "default": 4, "min": 0, "description": "Dense block layers"},
        "growth_rate": {"type": "int", "default": 8, "min": 1, "description": "Channels added per dense layer"},
        "hidden_channels": {"type": "int", "default": 16, "min": 1,
                            "description": "Hidden channels of recurrent, direct and veil heads"},
        "kernel_size": {"type": "int", "default": 3, "min": 1, "description": "Odd convolution kernel size"},
        "veil_enabled": {"type": "bool", "default": False, "description": "Add the inverse-transmittance head"},
        "share_stage_weights": {"type": "bool", "default": False,
                                "description": "Reuse stage 1 weights in every later stage"},
        "stage_loss_weights": {"type": "float_list", "default": None,
                               "description": "Rain supervision weight per stage (empty: all 1)"},
        "seed": {"type": "int", "default": 0, "min": 0, "description": "Parameter initialisation seed"},
    },
    "scene": {
        "seed": {"type": "int", "default": None, "min": 0,
                 "description": "Master seed of the corpus (empty: DERAIN_SEED)"},
        "image_size": {"type": "int_list", "default": [64, 64], "length": 2, "description": "Height, width"},
        "bins": {"type": "str_list", "default": ["small", "middle", "large"],
                 "choices": list(BINS_BY_LABEL), "description": "Streak scale bins rendered per scene"},
        "coverage": {"type": "float", "default": 0.12, "min": 0.0,
                     "description": "Target fraction of pixels covered by streaks of each bin"},
        "orientations": {"type": "float_list", "default": list(DEFAULT_ORIENTATIONS),
                         "description": "Candidate streak angles in degrees"},
        "beta": {"type": "float_list", "default": [0.3, 1.0], "length": 2,
                 "description": "Attenuation coefficient range"},
        "atmospheric_light": {"type": "float_list", "default": [0.7, 1.0], "length": 2,
                              "description": "Atmospheric light range"},
        "veil_enabled": {"type": "bool", "default": False, "description": "Render the veiling effect"},
        "background_kind": {"type": "str", "default": "mixed",
                            "choices": ["value_noise", "gradient", "mixed"], "description": "Background generator"},
        "depth_kind": {"type": "str", "default": "ramp_blobs", "choices": ["ramp", "ramp_blobs"],
                       "description": "Depth map generator"},
    },
    "train": {
        "epochs": {"type": "int", "default": 20, "min": 1, "description": "Passes over the training split"},
        "batch_size": {"type": "int", "default": 4, "min": 1, "description": "Scenes per gradient step"},
        "optimizer": {"type": "str", "default": "adam", "choices": ["adam", "sgd"], "description": "Update rule"},
        "learning_rate": {"type": "float", "default": 1e-3, "min": 0.0, "description": "Step size"},
        "betas": {"type": "float_list", "default": [0.9, 0.999], "length": 2, "description": "Adam moment decay"},
        "holdout_fraction": {"type": "float", "default": 0.25, "min": 0.0,
                             "description": "Trailing fraction of the corpus held out"},
        "shuffle": {"type": "bool", "default": True, "description": "Reorder training scenes each epoch"},
        "shuffle_seed": {"type": "int", "default": 0, "min": 0, "description": "Seed of the batch order"},
        "light_mode": {"type": "str", "default": "known", "choices": ["known", "brightest_pixel"],
                       "description": "Atmospheric light used for held-out evaluation"},
    },
}

_TRUE = ('1', 'true', 'yes', 'on')
_FALSE = ('0', 'false', 'no', 'off')


def get_default_run_config():
    """Every section with every key at its default"""
    return {
        section: {key: _copy(rule["default"]) for key, rule in keys.items()}
        for section, keys in RUN_CONFIG_SCHEMA.items()
    }


def _copy(value):
    return list(value) if isinstance(value, list) else value


def _split(value):
    if isinstance(value, (list, tuple)):
        return list(value)
    text = str(value).strip()
    return [item.strip() for item in text.split(',') if item.strip()] if text else []


def _coerce(rule, value):
    """Convert ``value`` (a string from the file or a typed override) to the rule's type"""
    kind = rule["type"]
    if kind == "int":
        if isinstance(value, bool):
            raise ValueError("expected an integer")
        return int(value)
    if kind == "float":
        return float(value)
    if kind == "bool":
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in _TRUE:
            return True
        if text in _FALSE:
            return False
        raise ValueError("expected on/off")
    if kind == "str":
        return str(value).strip()
    items = _split(value)
    if kind == "int_list":
        return [int(v) for v in items]
    if kind == "float_list":
        return [float(v) for v in items]
    return [str(v) for v in items]


def validate_run_config(data):
    """
    Validates a parsed run configuration against the schema

    Args:
        data: section -> key -> raw value

    Returns:
        tuple: (is_valid: bool, errors: list, sanitized_data: dict)
    """
    errors = []
    sanitized = get_default_run_config()

    for section, values in data.items():
        if section not in RUN_CONFIG_SCHEMA:
            errors.append(f"Unknown section: [{section}]")
            continue
        for key, value in values.items():
            rule = RUN_CONFIG_SCHEMA[section].get(key)
            if rule is None:
                errors.append(f"Unknown key: {section}.{key}")
                continue
            if value is None or (rule["default"] is None and not _split(value)):
                sanitized[section][key] = None
                continue
            try:
                coerced = _coerce(rule, value)
            except (ValueError, TypeError):
                errors.append(f"{section}.{key} must be of type {rule['type']} (got {value!r})")
                continue
            if "min" in rule and coerced < rule["min"]:
                errors.append(f"{section}.{key} must be >= {rule['min']}")
                continue
            if "length" in rule and len(coerced) != rule["length"]:
                errors.append(f"{section}.{key} needs exactly {rule['length']} values")
                continue
            if "choices" in rule:
                chosen = coerced if isinstance(coerced, list) else [coerced]
                bad = [c for c in chosen if c not in rule["choices"]]
                if bad:
                    errors.append(f"{section}.{key} must be one of {rule['choices']} (got {bad})")
                    continue
            sanitized[section][key] = coerced

    is_valid = len(errors) == 0
    return is_valid, errors, sanitized


def parse_run_config(text, source='<string>'):
    """Parse the INI text into section -> key -> raw string"""
    parser = configparser.ConfigParser(
        delimiters=('=',),
        comment_prefixes=('#',),
        inline_comment_prefixes=('#',),
        strict=True,
        interpolation=None,
    )
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError(f"{source}:{e.lineno}: key outside of any section")
    except configparser.DuplicateOptionError as e:
        raise ConfigError(f"{source}:{e.lineno}: duplicate key {e.section}.{e.option}")
    except configparser.DuplicateSectionError as e:
        raise ConfigError(f"{source}:{e.lineno}: duplicate section [{e.section}]")
    except configparser.ParsingError as e:
        lineno, _ = e.errors[0]
        raise ConfigError(f"{source}:{lineno}: expected 'key = value' or '[section]'")
    return {section: dict(parser[section]) for section in parser.sections()}


def load_run_config(path=None, overrides=None):
    """
    Resolve the run configuration: defaults, then the file, then overrides.

    ``overrides`` maps ``"section.key"`` to a typed value or a string; None
    values are skipped so unset command-line flags leave the file alone.
    """
    data = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding='utf-8')
        except OSError as e:
            raise StorageError(path, f"cannot read run config ({e.strerror or e})")
        data = parse_run_config(text, str(path))
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, key = dotted.split('.', 1)
        data.setdefault(section, {})[key] = value

    is_valid, errors, sanitized = validate_run_config(data)
    if not is_valid:
        raise ConfigError("invalid run config: " + "; ".join(errors))
    return sanitized


def _render(value):
    if value is None:
        return ''
    if isinstance(value, bool):
        return 'on' if value else 'off'
    if isinstance(value, list):
        return ', '.join(_render(v) for v in value)
    return str(value)


def write_run_config(config, path):
    """Write the resolved configuration (every default included) in the file grammar"""
    path = Path(path)
    if path.is_dir():
        path = path / RUN_CONFIG_NAME
    lines = []
    for section, keys in RUN_CONFIG_SCHEMA.items():
        lines.append(f"[{section}]")
        for key, rule in keys.items():
            lines.append(f"# {rule['description']}")
            lines.append(f"{key} = {_render(config[section][key])}")
        lines.append('')
    try:
        path.write_text('\n'.join(lines), encoding='utf-8')
    except OSError as e:
        raise StorageError(path, f"cannot write run config ({e.strerror or e})")
    return path


def network_config_from(config):
    values = dict(config["network"])
    if values["stage_loss_weights"] is not None:
        values["stage_loss_weights"] = tuple(values["stage_loss_weights"])
    return NetworkConfig(**values)


def scene_spec_from(config, seed=None):
    """``seed`` overrides scene.seed; with neither set the master seed is 0"""
    scene = config["scene"]
    if seed is None:
        seed = scene["seed"] if scene["seed"] is not None else 0
    image_size = tuple(scene["image_size"])
    wanted = set(scene["bins"])
    bins = tuple(b for b in default_bin_settings(image_size, scene["coverage"]) if b.bin.label in wanted)
    if not bins:
        raise ConfigError("scene.bins selects no streak bin")
    return RainSceneSpec(
        seed=int(seed),
        image_size=image_size,
        bins=bins,
        orientations=tuple(scene["orientations"]),
        beta=tuple(scene["beta"]),
        atmospheric_light=tuple(scene["atmospheric_light"]),
        veil_enabled=scene["veil_enabled"],
        background_kind=scene["background_kind"],
        depth_kind=scene["depth_kind"],
    )


def training_config_from(config):
    values = dict(config["train"])
    values["betas"] = tuple(values["betas"])
    return TrainingConfig(**values)
