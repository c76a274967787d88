"""Warning and error classes, labelled matrices and small helpers used across tbdmnet."""
import hashlib
import json
from . import _repr_text
import numpy as np
from typing import Any, Dict, Iterable, List, Sequence, Tuple, Union


class TbdmWarning(RuntimeWarning):
    """Generic tbdmnet warning."""


class ExtractionWarning(TbdmWarning):
    """Problem encountered while turning audio into feature files."""


class FrameCountWarning(TbdmWarning):
    """Frame count was derived from the data instead of being configured."""


class PerformanceWarning(UserWarning):
    """Warning about performance issues."""


class TbdmError(Exception):
    """Base class of all tbdmnet errors.

    The class attribute ``exit_code`` is the process exit code used by the command line
    interface when the error reaches the top level.
    """

    exit_code = 1


class ConfigError(TbdmError, ValueError):
    """Invalid configuration: model, training, run or feature layout."""

    exit_code = 2


class DataError(TbdmError, ValueError):
    """Unreadable or inconsistent input data."""

    exit_code = 3


class NumericError(TbdmError, FloatingPointError):
    """Non-finite loss or gradient during training."""

    exit_code = 4


class ConfusionMatrix(np.ndarray):
    """
    Square count matrix with rows for true labels and columns for predictions.

    Works like a normal ndarray in computations, but elements can also be accessed with
    label names and the matrix renders as a box table.
    """

    __slots__ = ("_var2pos",)

    def __new__(cls, labels: Union[Dict, Tuple, List]) -> Any:
        """Not to be initialized by users."""
        if isinstance(labels, dict):
            var2pos = labels
        elif isinstance(labels, (tuple, list)):
            var2pos = {x: i for i, x in enumerate(labels)}
        else:
            raise TypeError("labels must be tuple, list or dict")
        n = len(labels)
        obj = super(ConfusionMatrix, cls).__new__(cls, (n, n), dtype=np.int64)
        obj[:] = 0
        obj._var2pos = var2pos
        return obj

    def __array_finalize__(self, obj: Any) -> None:
        """For internal use."""
        if obj is None:
            self._var2pos = None
        else:
            self._var2pos = getattr(obj, "_var2pos", None)

    def __getitem__(self, key: Any) -> Any:
        """Get matrix element at key, label names are accepted in place of indices."""
        var2pos = self._var2pos or {}
        if isinstance(key, tuple):
            key = tuple(var2pos[k] if isinstance(k, str) else k for k in key)
        elif isinstance(key, str):
            key = var2pos[key]
        return super(ConfusionMatrix, self).__getitem__(key)

    @classmethod
    def from_predictions(
        cls, labels: Sequence[str], truth: Iterable[int], preds: Iterable[int]
    ) -> "ConfusionMatrix":
        """Count (truth, prediction) pairs into a new matrix."""
        cm = cls(tuple(labels))
        n = len(labels)
        truth = np.asarray(truth, dtype=np.int64)
        preds = np.asarray(preds, dtype=np.int64)
        counts = np.bincount(truth * n + preds, minlength=n * n)
        cm[:] = counts.reshape(n, n)
        return cm

    @property
    def labels(self) -> Tuple[str, ...]:
        """Get class labels in row order."""
        return tuple(self._var2pos or ())

    @property
    def support(self) -> np.ndarray:
        """Get number of true samples per class."""
        return np.asarray(self).sum(axis=1)

    def to_table(self) -> Tuple[List[List[Any]], Tuple[str, ...]]:
        """
        Convert matrix to tabular format.

        The output is consumable by the external
        `tabulate <https://pypi.org/project/tabulate>`_ module.

        Examples
        --------
        >>> import tabulate as tab
        >>> cm = ConfusionMatrix.from_predictions(("a", "b"), [0, 0, 1], [0, 1, 1])
        >>> tab.tabulate(*cm.to_table())
              a    b
        --  ---  ---
        a     1    1
        b     0    1
        """
        names = self.labels
        tab = []
        for i, name in enumerate(names):
            tab.append([name] + [int(x) for x in np.asarray(self)[i]])
        return tab, names

    def to_list(self) -> List[List[int]]:
        """Return nested list of python ints, for serialization."""
        return [[int(x) for x in row] for row in np.asarray(self)]

    def __repr__(self):
        """Get detailed text representation."""
        return super(ConfusionMatrix, self).__str__()

    def __str__(self):
        """Get user-friendly text representation."""
        return _repr_text.confusion(self)

    def _repr_pretty_(self, p, cycle):
        if cycle:
            p.text("<ConfusionMatrix ...>")
        else:
            p.text(str(self))


class Settings:
    """
    Base of the configuration records.

    Subclasses declare their fields in ``__slots__``, assign them in ``__init__`` and
    implement ``validate``, which raises :class:`ConfigError`.
    """

    __slots__ = ()

    def validate(self) -> None:  # pragma: no cover
        raise NotImplementedError

    def to_dict(self) -> Dict[str, Any]:
        """Return fields as a JSON-compatible dict."""
        return {
            k: list(v) if isinstance(v, tuple) else v
            for k, v in ((k, getattr(self, k)) for k in self.__slots__)
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> Any:
        """Create from a dict, unknown keys raise :class:`ConfigError`."""
        unknown = set(d) - set(cls.__slots__)
        if unknown:
            raise ConfigError(f"unknown {cls.__name__} keys {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes: Any) -> Any:
        """Return a validated copy with some fields changed."""
        d = self.to_dict()
        d.update(changes)
        return self.from_dict(d)

    def __eq__(self, other: Any) -> bool:
        """Return True if all fields are equal."""
        return type(self) is type(other) and self.to_dict() == other.to_dict()

    def __repr__(self) -> str:
        """Get detailed text representation."""
        args = ", ".join(f"{k}={getattr(self, k)!r}" for k in self.__slots__)
        return f"{type(self).__name__}({args})"


def canonical_json(obj: Any) -> str:
    """Serialize to JSON with sorted keys and no insignificant whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def short_hash(obj: Any, n: int = 12) -> str:
    """Return the first n hex digits of the SHA-256 of the canonical JSON of obj."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:n]


def as_generator(seed_or_rng: Any) -> np.random.Generator:
    """Return a numpy Generator, creating one from an int seed if needed."""
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)
