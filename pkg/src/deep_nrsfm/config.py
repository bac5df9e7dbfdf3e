"""INI-style run configuration shared by the command-line tools.

A config file has up to four sections, every key optional::

    [synth]
    p = 15
    frames = 4000
    k = 32, 8
    sparsity = 2
    code_scale = 1.0

    [model]
    k = 128, 32, 8

    [train]
    steps = 20000
    batch_size = 64
    learning_rate = 0.001
    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-8
    checkpoint_every = 1000
    input_rms = 1.0

    [sweep]
    ratios = 0, 0.05, 0.10

All randomness derives from one integer seed: the generator uses ``seed``
for its dictionaries and codes and ``seed + 1`` for its cameras, training
uses ``seed`` for initialisation and batch order, and the noise sweep uses
``seed`` for the noise draws.
"""

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path

from .data import SynthConfig
from .exceptions import ConfigError, ShapeError
from .network import layer_sizes
from .train import TrainConfig

DEFAULT_MODEL_K = (128, 32, 8)

_KEYS = {
    "synth": {"p": int, "frames": int, "k": "ints", "sparsity": int, "code_scale": float},
    "model": {"k": "ints"},
    "train": {"steps": int, "batch_size": int, "learning_rate": float, "beta1": float,
              "beta2": float, "eps": float, "checkpoint_every": int, "input_rms": float},
    "sweep": {"ratios": "floats"},
}

_TRAIN_FIELDS = {"beta1": "adam_beta1", "beta2": "adam_beta2", "eps": "adam_eps"}


@dataclass(frozen=True)
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    model_k: tuple = DEFAULT_MODEL_K
    train: TrainConfig = field(default_factory=TrainConfig)
    ratios: tuple = (0.0, 0.05, 0.10)
    seed: int = 0

    def sizes(self, p):
        return layer_sizes(p, self.model_k)

    def with_seed(self, seed):
        seed = int(seed)
        return replace(self, seed=seed,
                       synth=replace(self.synth, dict_seed=seed, camera_seed=seed + 1),
                       train=replace(self.train, seed=seed))

    def with_runtime(self, threads=None, deterministic=None):
        changes = {}
        if threads is not None:
            changes["threads"] = int(threads)
        if deterministic is not None:
            changes["deterministic"] = bool(deterministic)
        return replace(self, train=replace(self.train, **changes))

    def validate(self):
        try:
            self.synth.validate()
            layer_sizes(self.synth.p, self.model_k)
            self.train.validate()
        except (ValueError, ShapeError) as exc:
            raise ConfigError(str(exc)) from exc
        if any(r < 0 for r in self.ratios):
            raise ConfigError("noise ratios must be nonnegative")
        if not self.ratios:
            raise ConfigError("at least one noise ratio is required")
        return self


def _convert(section, key, raw, kind):
    try:
        if kind == "ints":
            return tuple(int(x) for x in raw.replace(",", " ").split())
        if kind == "floats":
            return tuple(float(x) for x in raw.replace(",", " ").split())
        return kind(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None


def parse_config(text, source="<config>"):
    """Parse config text into a validated :class:`RunConfig`."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    values = {}
    for section in parser.sections():
        if section not in _KEYS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _KEYS[section]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            values[section, key] = _convert(section, key, raw, _KEYS[section][key])

    synth = SynthConfig()
    synth_map = {"p": "p", "frames": "frame_count", "k": "k", "sparsity": "sparsity",
                 "code_scale": "code_scale"}
    synth = replace(synth, **{synth_map[k]: v for (s, k), v in values.items() if s == "synth"})
    train = replace(TrainConfig(), **{_TRAIN_FIELDS.get(k, k): v
                                      for (s, k), v in values.items() if s == "train"})
    cfg = RunConfig(synth=synth, model_k=values.get(("model", "k"), DEFAULT_MODEL_K),
                    train=train, ratios=values.get(("sweep", "ratios"), RunConfig.ratios))
    return cfg.validate()


def load_config(path):
    if path is None:
        return RunConfig().validate()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(encoding="utf-8"), str(path))
