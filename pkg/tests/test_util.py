import numpy as np
import pytest
from numpy.testing import assert_equal

from tbdmnet import util
from tbdmnet.util import ConfigError, ConfusionMatrix, DataError, NumericError, Settings


def test_errors():
    assert util.TbdmError.exit_code == 1
    assert ConfigError.exit_code == 2
    assert DataError.exit_code == 3
    assert NumericError.exit_code == 4
    assert issubclass(ConfigError, ValueError)
    assert issubclass(DataError, ValueError)
    assert issubclass(NumericError, FloatingPointError)
    assert issubclass(util.ExtractionWarning, util.TbdmWarning)
    assert issubclass(util.FrameCountWarning, RuntimeWarning)


def test_ConfusionMatrix():
    cm = ConfusionMatrix.from_predictions(("x", "y", "z"), [0, 1, 2, 2], [0, 2, 2, 1])
    assert_equal(cm, [[1, 0, 0], [0, 0, 1], [0, 1, 1]])
    assert cm.labels == ("x", "y", "z")
    assert cm["z", "z"] == 1
    assert cm["y", "z"] == 1
    assert_equal(cm["z"], [0, 1, 1])
    assert_equal(cm[1], [0, 0, 1])
    assert_equal(cm.support, [1, 1, 2])
    assert cm.to_list() == [[1, 0, 0], [0, 0, 1], [0, 1, 1]]
    assert all(type(x) is int for row in cm.to_list() for x in row)
    assert repr(cm) == str(np.asarray(cm))
    assert cm.to_table() == (
        [["x", 1, 0, 0], ["y", 0, 0, 1], ["z", 0, 1, 1]],
        ("x", "y", "z"),
    )

    cm2 = cm * 2
    assert cm2.labels == cm.labels
    assert cm2["z", "y"] == 2

    with pytest.raises(TypeError):
        ConfusionMatrix("xy")


def test_Settings():
    class Point(Settings):
        __slots__ = ("x", "shape")

        def __init__(self, x=0, shape=(1, 2)):
            self.x = x
            self.shape = tuple(shape)
            self.validate()

        def validate(self):
            if self.x < 0:
                raise ConfigError("x must be non-negative")

    p = Point(1)
    assert p.to_dict() == {"x": 1, "shape": [1, 2]}
    assert Point.from_dict({"x": 1, "shape": [1, 2]}) == p
    assert p.replace(x=2) == Point(2)
    assert p != Point(2)
    assert repr(p) == "Point(x=1, shape=(1, 2))"
    with pytest.raises(ConfigError, match=r"unknown Point keys \['y'\]"):
        Point.from_dict({"y": 1})
    with pytest.raises(ConfigError):
        p.replace(x=-1)


def test_short_hash():
    a = util.short_hash({"b": 1, "a": [1, 2]})
    assert a == util.short_hash({"a": [1, 2], "b": 1})
    assert len(a) == 12
    assert int(a, 16) >= 0
    assert a != util.short_hash({"a": [1, 2], "b": 2})
    assert len(util.short_hash("x", 8)) == 8
    assert util.canonical_json({"b": 1, "a": None}) == '{"a":null,"b":1}'


def test_as_generator():
    rng = np.random.default_rng(1)
    assert util.as_generator(rng) is rng
    assert util.as_generator(5).integers(1000) == np.random.default_rng(5).integers(1000)


def test_ConfusionMatrix_slicing():
    cm = ConfusionMatrix.from_predictions(("x", "y"), [0, 1, 1], [1, 1, 0])
    assert_equal(cm[0:2, 1], [1, 1])
    assert_equal(cm[:, "x"], [0, 1])
    with pytest.raises(KeyError):
        cm["w", "x"]
