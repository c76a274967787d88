"""
Run configuration.

A run is configured by an optional INI file with the sections ``[model]``, ``[train]``,
``[paths]`` and ``[run]``, for example::

    [model]
    activation = relu
    dilations = 1, 2, 4, 8, 16, 32

    [train]
    epochs = 300
    seed = 7

    [paths]
    manifest = ravdess.csv
    features = features/ravdess
    output = runs/ravdess

    [run]
    preset = ravdess
    folds = 10

Keys are unique across sections, so every key can be overridden on the command line
with ``--some-key value``. Relative paths in a file are resolved against the file's
directory. The seed falls back to the ``TBDM_SEED`` environment variable, then to 0.
"""
import configparser
import os
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple, Union

from .model import ModelConfig
from .train import TrainConfig
from .util import ConfigError

SEED_VARIABLE = "TBDM_SEED"


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{s!r} is not a boolean")


def _ints(s: str) -> Tuple[int, ...]:
    return tuple(int(x) for x in s.replace(",", " ").split())


def _str(s: str) -> str:
    return s.strip()


def _path(s: str) -> Path:
    return Path(s.strip())


_MODEL = {
    "n_classes": int,
    "input_channels": int,
    "n_tabs": int,
    "dilations": _ints,
    "filters": int,
    "kernel_size": int,
    "activation": _str,
    "bidirectional": _bool,
    "multiscale": _bool,
    "merge": _str,
    "dropout_rate": float,
    "use_batch_norm": _bool,
}
_TRAIN = {
    "epochs": int,
    "lr": float,
    "beta1": float,
    "beta2": float,
    "eps": float,
    "batch_size": int,
    "seed": int,
    "shuffle_each_epoch": _bool,
    "dtype": _str,
    "verbose": int,
    "eval_batch_size": int,
}
_PATHS = {"manifest": _path, "features": _path, "output": _path, "gender_file": _path}
_RUN = {
    "dataset": _str,
    "folds": int,
    "jobs": int,
    "frames": int,
    "gender_mode": _str,
    "preset": _str,
}

SECTIONS: Dict[str, Dict[str, Callable[[str], Any]]] = {
    "model": _MODEL,
    "train": _TRAIN,
    "paths": _PATHS,
    "run": _RUN,
}

# key -> (section, parser)
KEYS = {k: (s, p) for s, d in SECTIONS.items() for k, p in d.items()}


def option_name(key: str) -> str:
    """Return the command line flag of a key."""
    return "--" + key.replace("_", "-")


class RunConfig:
    """
    Merged view of model, training, path and run settings.

    Only keys that were set are stored, everything else takes the defaults of
    :class:`ModelConfig`, :class:`TrainConfig` and the commands.
    """

    __slots__ = ("_values",)

    def __init__(self, values: Optional[Dict[str, Any]] = None):
        self._values: Dict[str, Any] = {}
        for k, v in (values or {}).items():
            self.set(k, v)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "RunConfig":
        """Read an INI file, unknown sections or keys raise :class:`ConfigError`."""
        path = Path(path)
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as f:
                parser.read_file(f)
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from e
        if parser.defaults():
            raise ConfigError(f"{path}: keys outside of a section are not allowed")
        rc = cls()
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(
                    f"{path}: unknown section [{section}], expected one of {sorted(SECTIONS)}"
                )
            for key, value in parser.items(section):
                if key not in SECTIONS[section]:
                    raise ConfigError(f"{path}: unknown key {key!r} in section [{section}]")
                rc.set(key, value)
                if section == "paths" and not rc._values[key].is_absolute():
                    rc._values[key] = path.parent / rc._values[key]
        return rc

    def set(self, key: str, value: Any) -> None:
        """Set a key, strings are parsed according to the key."""
        if key not in KEYS:
            raise ConfigError(f"unknown configuration key {key!r}")
        if isinstance(value, str):
            try:
                value = KEYS[key][1](value)
            except ValueError as e:
                raise ConfigError(f"invalid value for {key}: {e}") from None
        self._values[key] = value

    def get(self, key: str, default: Any = None) -> Any:
        """Return value of a key or default if unset."""
        if key not in KEYS:
            raise ConfigError(f"unknown configuration key {key!r}")
        return self._values.get(key, default)

    def __contains__(self, key: str) -> bool:
        return key in self._values

    def section(self, name: str) -> Dict[str, Any]:
        """Return the set keys of a section."""
        return {k: v for k, v in self._values.items() if KEYS[k][0] == name}

    def seed(self) -> int:
        """Return the seed: flag or file value, else ``TBDM_SEED``, else 0."""
        if "seed" in self._values:
            return self._values["seed"]
        env = os.environ.get(SEED_VARIABLE)
        if env:
            try:
                return int(env)
            except ValueError:
                raise ConfigError(f"{SEED_VARIABLE}={env!r} is not an integer") from None
        return 0

    def model_config(self, n_classes: int, input_channels: int) -> ModelConfig:
        """
        Return the model configuration for data with given classes and channels.

        Explicitly configured ``n_classes`` or ``input_channels`` must agree with the data.
        """
        kw = self.section("model")
        for key, actual in (("n_classes", n_classes), ("input_channels", input_channels)):
            if key in kw and kw[key] != actual:
                raise ConfigError(f"configured {key}={kw[key]} but the data has {actual}")
            kw[key] = actual
        return ModelConfig(**kw)

    def train_config(self) -> TrainConfig:
        """Return the training configuration with the resolved seed."""
        kw = self.section("train")
        kw["seed"] = self.seed()
        return TrainConfig(**kw)

    def path(self, key: str) -> Optional[Path]:
        """Return a configured path or None."""
        if KEYS.get(key, ("",))[0] != "paths":
            raise ConfigError(f"{key!r} is not a path key")
        return self._values.get(key)

    def require_paths(self, *names: str) -> None:
        """Raise :class:`ConfigError` unless all named paths are set and exist."""
        for name in names:
            p = self.path(name)
            if p is None:
                raise ConfigError(f"{option_name(name)} is required")
            if not p.exists():
                raise ConfigError(f"{option_name(name)} {p} does not exist")

    def to_dict(self) -> Dict[str, Any]:
        return {k: str(v) if isinstance(v, Path) else v for k, v in self._values.items()}

    def __repr__(self) -> str:
        return f"RunConfig({self.to_dict()!r})"
