"""Flat ``key = value`` run configuration with ``#`` comments.

Every key is checked against a schema; unknown keys and malformed values
are errors. Lists are comma separated. Presets ship in ``dygait/configs``.
"""
import os
from dataclasses import dataclass, field, fields

from dygait.evaluation import PROTOCOLS
from dygait.model import MODES, ModelConfig
from dygait.train import OPTIMIZERS, TrainConfig

PRESET_DIR = os.path.join(os.path.dirname(__file__), "configs")


class ConfigError(ValueError):
    pass


def _ints(text):
    text = text.strip()
    return tuple(int(v) for v in text.split(",")) if text else ()


def _floats(text):
    return tuple(float(v) for v in text.split(","))


def _choice(options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text

    return parse


def _int(text):
    return int(text, 0)


# key -> (section, attribute, parser)
SCHEMA = {
    "stage_channels": ("model", "stage_channels", _ints),
    "pool_after": ("model", "pool_after", _ints),
    "strips": ("model", "strips", _int),
    "embed_dim": ("model", "embed_dim", _int),
    "leaky_slope": ("model", "leaky_slope", float),
    "input_size": ("model", "input_size", _ints),
    "ablation": ("model", "ablation", _choice(MODES)),
    "P": ("train", "P", _int),
    "K": ("train", "K", _int),
    "clip_len": ("train", "clip_len", _int),
    "iterations": ("train", "iterations", _int),
    "optimizer": ("train", "optimizer", _choice(OPTIMIZERS)),
    "lr": ("train", "lr", float),
    "momentum": ("train", "momentum", float),
    "adam_betas": ("train", "adam_betas", _floats),
    "margin": ("train", "margin", float),
    "seed": ("train", "seed", _int),
    "checkpoint_every": ("train", "checkpoint_every", _int),
    "normalize": ("run", "normalize", _choice(("crop", "resize"))),
    "prefetch": ("run", "prefetch", _int),
    "protocol": ("run", "protocol", _choice(PROTOCOLS)),
    "distance": ("run", "distance", _choice(("concat", "strip_sum"))),
    "manifest": ("run", "manifest", str),
    "out": ("run", "out", str),
    "threads": ("run", "threads", _int),
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    normalize: str = "crop"
    prefetch: int = 0
    protocol: str = "plain"
    distance: str = "concat"
    manifest: str = ""
    out: str = ""
    threads: int = 0  # 0 leaves the worker count to the runtime


def parse_lines(text, source="<config>"):
    """Raw ``{key: (value, line number)}`` from config text."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = (value, lineno)
    return out


def build(values, base=None, source="<config>"):
    """Apply ``{key: str or (str, line)}`` on top of ``base`` (a RunConfig) and validate."""
    base = base or RunConfig()
    sections = {
        "model": {f.name: getattr(base.model, f.name) for f in fields(ModelConfig)},
        "train": {f.name: getattr(base.train, f.name) for f in fields(TrainConfig)},
        "run": {f.name: getattr(base, f.name) for f in fields(RunConfig) if f.name not in ("model", "train")},
    }
    for key, raw in values.items():
        value, lineno = raw if isinstance(raw, tuple) else (raw, None)
        where = f"{source}:{lineno}" if lineno else source
        if key not in SCHEMA:
            raise ConfigError(f"{where}: unknown key {key!r}")
        section, attr, parse = SCHEMA[key]
        try:
            sections[section][attr] = parse(value)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value {value!r} for {key}: {exc}") from None
    try:
        model = ModelConfig(**sections["model"])
        train = TrainConfig(**sections["train"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: {exc}") from None
    run = RunConfig(model, train, **sections["run"])
    if run.prefetch < 0 or run.threads < 0:
        raise ConfigError(f"{source}: prefetch and threads must be non-negative")
    return run


def load(path, overrides=None):
    """Read ``path`` (a file, or a preset name such as ``desk``) and apply ``overrides``."""
    path = resolve(path)
    with open(path, encoding="utf-8") as fh:
        run = build(parse_lines(fh.read(), path), source=path)
    if overrides:
        run = build(overrides, run, "command line")
    return run


def resolve(path):
    if os.path.exists(path):
        return path
    preset = os.path.join(PRESET_DIR, path if path.endswith(".cfg") else path + ".cfg")
    if os.path.exists(preset):
        return preset
    raise FileNotFoundError(f"config file not found: {path}")


def presets():
    return sorted(n[:-4] for n in os.listdir(PRESET_DIR) if n.endswith(".cfg"))


def dump(run):
    """Config text that ``parse_lines`` + ``build`` turns back into ``run``."""
    lines = []
    for key, (section, attr, _) in SCHEMA.items():
        obj = run.model if section == "model" else run.train if section == "train" else run
        value = getattr(obj, attr)
        if isinstance(value, tuple):
            value = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
