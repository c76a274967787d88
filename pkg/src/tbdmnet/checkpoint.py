"""
Model checkpoints.

A checkpoint is a UTF-8 JSON header, a single NUL byte and the concatenated little
endian float32 payload of all tensors. The header holds the format version, the model
configuration, the label set, the frame count and gender mode of the features the model
was trained on, and an index of ``{name, shape, byte_offset}`` entries. Offsets count
from the first payload byte.
"""
import json
from pathlib import Path
import numpy as np
from typing import Dict, Optional, Sequence, Tuple, Union

from .model import ModelConfig, ModelParams, build, predict_proba
from .util import ConfigError, DataError

FORMAT_VERSION = 1


class Checkpoint:
    """Loaded model with the metadata needed to apply it to new utterances."""

    __slots__ = ("config", "params", "label_set", "frames", "gender_mode")

    def __init__(
        self,
        config: ModelConfig,
        params: ModelParams,
        label_set: Sequence[str],
        frames: Optional[int] = None,
        gender_mode: str = "none",
    ):
        self.config = config
        self.params = params
        self.label_set = tuple(label_set)
        self.frames = frames
        self.gender_mode = gender_mode

    def predict(self, X: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Return (N, n_classes) probabilities for a (N, C0, F) batch."""
        return predict_proba(self.params, self.config, X, batch_size)

    def __repr__(self) -> str:
        return (
            f"<Checkpoint config={self.config.hash()} labels={list(self.label_set)} "
            f"frames={self.frames} gender_mode={self.gender_mode!r}>"
        )


def to_bytes(
    params: ModelParams,
    config: ModelConfig,
    label_set: Sequence[str],
    frames: Optional[int] = None,
    gender_mode: str = "none",
) -> bytes:
    """Serialize a model."""
    if len(label_set) != config.n_classes:
        raise ConfigError(
            f"label set of size {len(label_set)} does not match n_classes={config.n_classes}"
        )
    entries = []
    chunks = []
    offset = 0
    tensors = [(n, t.data) for n, t in params.named_parameters()] + params.named_buffers()
    for name, data in tensors:
        a = np.ascontiguousarray(data, dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape), "byte_offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": config.to_dict(),
        "label_set": list(label_set),
        "frames": frames,
        "gender_mode": gender_mode,
        "tensors": entries,
    }
    return json.dumps(header, sort_keys=True).encode("utf-8") + b"\0" + b"".join(chunks)


def from_bytes(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    """Deserialize a model, the inverse of :func:`to_bytes`."""
    end = raw.find(b"\0")
    if end < 0:
        raise DataError(f"{source}: checkpoint header is not terminated")
    try:
        header = json.loads(raw[:end].decode("utf-8"))
    except ValueError as e:
        raise DataError(f"{source}: corrupt checkpoint header: {e}") from e
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise DataError(f"{source}: unsupported checkpoint format version {version}")
    try:
        config = ModelConfig.from_dict(header["model_config"])
        entries = header["tensors"]
        label_set = header["label_set"]
    except (KeyError, TypeError, ConfigError) as e:
        raise DataError(f"{source}: invalid checkpoint header: {e}") from e
    if len(label_set) != config.n_classes:
        raise DataError(
            f"{source}: label set of size {len(label_set)} does not match "
            f"n_classes={config.n_classes}"
        )

    payload = memoryview(raw)[end + 1 :]
    state: Dict[str, np.ndarray] = {}
    for e in entries:
        shape: Tuple[int, ...] = tuple(e["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        offset = e["byte_offset"]
        if offset < 0 or offset + 4 * count > len(payload):
            raise DataError(f"{source}: tensor {e['name']} lies outside the payload")
        state[e["name"]] = np.frombuffer(payload, "<f4", count, offset).reshape(shape)

    params = build(config, rng=0)
    try:
        params.load_state_dict(state)
    except ValueError as e:
        raise DataError(f"{source}: {e}") from e
    return Checkpoint(
        config, params, label_set, header.get("frames"), header.get("gender_mode", "none")
    )


def save_checkpoint(
    path: Union[str, Path],
    params: ModelParams,
    config: ModelConfig,
    label_set: Sequence[str],
    frames: Optional[int] = None,
    gender_mode: str = "none",
) -> None:
    """
    Write a checkpoint file.

    Parameters
    ----------
    path : path
    params : ModelParams
    config : ModelConfig
    label_set : sequence of str
        Class names in label index order.
    frames : int, optional
        Frame count F of the training features.
    gender_mode : str, optional
        Gender rows of the training features.
    """
    Path(path).write_bytes(to_bytes(params, config, label_set, frames, gender_mode))


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Read a checkpoint file written by :func:`save_checkpoint`."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    return from_bytes(raw, str(path))

