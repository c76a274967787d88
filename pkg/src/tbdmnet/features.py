"""
Audio loading, MFCC extraction, frame fitting, gender injection and feature files.

The MFCC pipeline is fixed: 22050 Hz mono audio, a 2048-point periodic Hann window with
hop 512 on a reflect-padded signal, the power spectrum, 128 Slaney-normalized mel bands,
decibel conversion with an 80 dB dynamic range and an orthonormal DCT-II of which the
first 39 coefficients are kept.

Feature files hold one float32 matrix per utterance::

    b"TBDM" | u32 version | u32 channels | u32 frames | float32[channels * frames]

all little endian, row major with channels first.
"""
import csv
import json
import math
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from functools import lru_cache
from pathlib import Path
import numpy as np
from scipy import fft
from scipy.io import wavfile
from scipy.signal import get_window, resample_poly
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

from .util import ConfigError, DataError, ExtractionWarning, FrameCountWarning

SAMPLE_RATE = 22050
N_FFT = 2048
HOP_LENGTH = 512
N_MELS = 128
N_MFCC = 39
TOP_DB = 80.0
AMIN = 1e-10

GENDER_MODES = ("none", "golden", "binary", "probabilities")
GENDER_ROWS = {"none": 0, "golden": 1, "binary": 1, "probabilities": 2}
# injected gender encoding
MALE = 0.0
FEMALE = 1.0

MANIFEST_COLUMNS = ("utterance_id", "audio_path", "emotion", "speaker", "gender")
GENDER_COLUMNS = ("utterance_id", "p_male", "p_female")

FEATURE_MAGIC = b"TBDM"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<III")
FEATURE_SUFFIX = ".tbf"
INDEX_FILE = "features.json"
LOG_FILE = "extract_log.json"

PathLike = Union[str, Path]


class Preset:
    """Emotion set, frame count and label mapping of a known corpus."""

    __slots__ = ("name", "emotions", "frames", "relabel")

    def __init__(
        self,
        name: str,
        emotions: Sequence[str],
        frames: Optional[int] = None,
        relabel: Optional[Dict[str, str]] = None,
    ):
        self.name = name
        self.emotions = tuple(emotions)
        self.frames = frames
        self.relabel = dict(relabel or {})

    def __repr__(self) -> str:
        return f"Preset({self.name!r}, emotions={self.emotions}, frames={self.frames})"


PRESETS = {
    p.name: p
    for p in (
        Preset("casia", ("angry", "fearful", "happy", "neutral", "sad", "surprised"), 172),
        Preset(
            "emodb",
            ("angry", "bored", "disgusted", "fearful", "happy", "neutral", "sad"),
        ),
        Preset(
            "emovo",
            ("angry", "disgusted", "fearful", "happy", "neutral", "sad", "surprised"),
        ),
        Preset(
            "iemocap", ("angry", "happy", "neutral", "sad"), 606, {"excited": "happy"}
        ),
        Preset(
            "ravdess",
            ("angry", "calm", "disgusted", "fearful", "happy", "sad", "surprised"),
        ),
        Preset(
            "savee",
            ("angry", "disgusted", "fearful", "happy", "neutral", "sad", "surprised"),
        ),
    )
}


def get_preset(name: Optional[str]) -> Optional[Preset]:
    """Look up a corpus preset by case-insensitive name, None passes through."""
    if name is None:
        return None
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise ConfigError(
            f"unknown dataset preset {name!r}, expected one of {sorted(PRESETS)}"
        ) from None


class Sample:
    """One manifest row."""

    __slots__ = ("utterance_id", "audio_path", "emotion", "speaker", "gender")

    def __init__(
        self,
        utterance_id: str,
        audio_path: PathLike,
        emotion: str,
        speaker: str = "",
        gender: str = "?",
    ):
        self.utterance_id = utterance_id
        self.audio_path = Path(audio_path)
        self.emotion = emotion
        self.speaker = speaker
        self.gender = gender

    def __eq__(self, other: Any) -> bool:
        return all(getattr(self, k) == getattr(other, k) for k in self.__slots__)

    def __repr__(self) -> str:
        return (
            f"Sample({self.utterance_id!r}, {str(self.audio_path)!r}, {self.emotion!r}, "
            f"speaker={self.speaker!r}, gender={self.gender!r})"
        )


class DatasetManifest:
    """
    Ordered utterance rows with a fixed label set.

    Label indices follow ``label_set``; with a corpus preset this is the preset order,
    otherwise the sorted set of emotions found in the rows.
    """

    __slots__ = ("samples", "label_set")

    def __init__(self, samples: Iterable[Sample], label_set: Optional[Sequence[str]] = None):
        self.samples = list(samples)
        ids = [s.utterance_id for s in self.samples]
        if len(set(ids)) != len(ids):
            seen = set()
            dup = next(i for i in ids if i in seen or seen.add(i))
            raise DataError(f"duplicate utterance_id {dup!r} in manifest")
        if label_set is None:
            label_set = sorted({s.emotion for s in self.samples})
        self.label_set = tuple(label_set)
        unknown = {s.emotion for s in self.samples} - set(self.label_set)
        if unknown:
            raise DataError(
                f"emotions {sorted(unknown)} are not in label set {self.label_set}"
            )

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    @property
    def ids(self) -> List[str]:
        """Get utterance ids in row order."""
        return [s.utterance_id for s in self.samples]

    @property
    def labels(self) -> np.ndarray:
        """Get integer labels in row order."""
        index = {e: i for i, e in enumerate(self.label_set)}
        return np.array([index[s.emotion] for s in self.samples], dtype=np.int64)

    def by_id(self) -> Dict[str, Sample]:
        """Return mapping from utterance id to row."""
        return {s.utterance_id: s for s in self.samples}


def _normalize_gender(value: str, where: str) -> str:
    g = value.strip().upper()
    if g in ("", "?", "U", "UNKNOWN"):
        return "?"
    if g not in ("M", "F"):
        raise DataError(f"{where}: gender must be M, F or ?, got {value!r}")
    return g


def read_manifest(path: PathLike, preset: Union[None, str, Preset] = None) -> DatasetManifest:
    """
    Read a CSV manifest with the columns utterance_id, audio_path, emotion, speaker, gender.

    Relative audio paths are resolved against the manifest directory. With a preset,
    emotions are mapped through the preset relabeling and rows whose emotion is not in
    the preset set are dropped with an :class:`ExtractionWarning`.
    """
    path = Path(path)
    if isinstance(preset, str):
        preset = get_preset(preset)
    try:
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or ())
            if missing:
                raise DataError(f"{path}: manifest lacks columns {sorted(missing)}")
            rows = list(reader)
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e

    samples = []
    dropped: Dict[str, int] = {}
    for lineno, row in enumerate(rows, start=2):
        where = f"{path}:{lineno}"
        uid = row["utterance_id"].strip()
        if not uid:
            raise DataError(f"{where}: empty utterance_id")
        emotion = row["emotion"].strip().lower()
        if preset is not None:
            emotion = preset.relabel.get(emotion, emotion)
            if emotion not in preset.emotions:
                dropped[emotion] = dropped.get(emotion, 0) + 1
                continue
        audio = Path(row["audio_path"].strip())
        if not audio.is_absolute():
            audio = path.parent / audio
        samples.append(
            Sample(
                uid,
                audio,
                emotion,
                row["speaker"].strip(),
                _normalize_gender(row["gender"], where),
            )
        )
    if dropped:
        warnings.warn(
            f"dropped {sum(dropped.values())} rows with emotions outside preset "
            f"{preset.name!r}: {dict(sorted(dropped.items()))}",
            ExtractionWarning,
            stacklevel=2,
        )
    return DatasetManifest(samples, preset.emotions if preset is not None else None)


def write_manifest(path: PathLike, manifest: Iterable[Sample]) -> None:
    """Write manifest rows as CSV."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(MANIFEST_COLUMNS)
        for s in manifest:
            w.writerow((s.utterance_id, str(s.audio_path), s.emotion, s.speaker, s.gender))


class GenderSidecar:
    """Per-utterance gender probabilities (p_male, p_female) from an external classifier."""

    __slots__ = ("_rows",)

    def __init__(self, rows: Optional[Dict[str, Tuple[float, float]]] = None):
        self._rows = dict(rows or {})

    def __len__(self) -> int:
        return len(self._rows)

    def __contains__(self, uid: str) -> bool:
        return uid in self._rows

    def __getitem__(self, uid: str) -> Tuple[float, float]:
        try:
            return self._rows[uid]
        except KeyError:
            raise DataError(f"no gender probabilities for utterance {uid!r}") from None

    def probabilities(self, ids: Sequence[str]) -> Tuple[np.ndarray, np.ndarray]:
        """Return p_male and p_female arrays for ids, all ids must be present."""
        missing = [i for i in ids if i not in self._rows]
        if missing:
            raise DataError(
                f"gender sidecar lacks {len(missing)} utterances: {missing[:5]}"
                + (" ..." if len(missing) > 5 else "")
            )
        p = np.array([self._rows[i] for i in ids], dtype=np.float64).reshape(-1, 2)
        return p[:, 0], p[:, 1]

    def binary(self, ids: Sequence[str]) -> np.ndarray:
        """Return hard decisions, female if and only if p_female > 0.5."""
        _, pf = self.probabilities(ids)
        return np.where(pf > 0.5, "F", "M")


def read_gender_sidecar(path: PathLike) -> GenderSidecar:
    """Read a CSV with the columns utterance_id, p_male, p_female."""
    path = Path(path)
    rows = {}
    try:
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            missing = set(GENDER_COLUMNS) - set(reader.fieldnames or ())
            if missing:
                raise DataError(f"{path}: gender file lacks columns {sorted(missing)}")
            for lineno, row in enumerate(reader, start=2):
                uid = row["utterance_id"].strip()
                try:
                    pm = float(row["p_male"])
                    pf = float(row["p_female"])
                except ValueError:
                    raise DataError(
                        f"{path}:{lineno}: probabilities must be numbers"
                    ) from None
                if not (0 <= pm <= 1 and 0 <= pf <= 1) or abs(pm + pf - 1) > 1e-6:
                    raise DataError(
                        f"{path}:{lineno}: p_male={pm} and p_female={pf} "
                        f"for {uid!r} must be probabilities summing to 1"
                    )
                rows[uid] = (pm, pf)
    except OSError as e:
        raise DataError(f"cannot read gender file {path}: {e}") from e
    return GenderSidecar(rows)


def load_audio(path: PathLike) -> Tuple[np.ndarray, int]:
    """
    Load a 16-bit PCM WAV file as mono float64 in [-1, 1) at 22050 Hz.

    Stereo is averaged over channels. Other sample rates are converted with polyphase
    resampling.
    """
    try:
        rate, data = wavfile.read(str(path))
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read audio file {path}: {e}") from e
    if data.dtype != np.int16:
        raise DataError(
            f"{path}: only 16-bit PCM WAV is supported, got samples of {data.dtype}"
        )
    samples = data.astype(np.float64) / 32768.0
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if samples.size == 0:
        raise DataError(f"{path}: audio file has no samples")
    if rate != SAMPLE_RATE:
        g = math.gcd(rate, SAMPLE_RATE)
        samples = resample_poly(samples, SAMPLE_RATE // g, rate // g)
    return samples, SAMPLE_RATE


def hz_to_mel(f: Any) -> np.ndarray:
    """Convert Hz to Slaney mels, linear below 1 kHz and logarithmic above."""
    f = np.asanyarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    mels = f / f_sp
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    log_t = f >= min_log_hz
    return np.where(
        log_t, min_log_mel + np.log(np.maximum(f, min_log_hz) / min_log_hz) / logstep, mels
    )


def mel_to_hz(m: Any) -> np.ndarray:
    """Convert Slaney mels to Hz."""
    m = np.asanyarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    freqs = f_sp * m
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    log_t = m >= min_log_mel
    return np.where(log_t, min_log_hz * np.exp(logstep * (m - min_log_mel)), freqs)


@lru_cache(maxsize=8)
def mel_filterbank(
    sample_rate: int = SAMPLE_RATE,
    n_fft: int = N_FFT,
    n_mels: int = N_MELS,
    fmin: float = 0.0,
    fmax: Optional[float] = None,
) -> np.ndarray:
    """
    Return the (n_mels, 1 + n_fft // 2) triangular mel filterbank with Slaney area norm.

    The result is cached and read-only.
    """
    if fmax is None:
        fmax = sample_rate / 2.0
    fftfreqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    mel_f = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    fdiff = np.diff(mel_f)
    ramps = mel_f[:, None] - fftfreqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0, np.minimum(lower, upper))
    weights *= (2.0 / (mel_f[2:] - mel_f[:-2]))[:, None]
    weights.setflags(write=False)
    return weights


def power_to_db(
    s: np.ndarray, amin: float = AMIN, top_db: Optional[float] = TOP_DB
) -> np.ndarray:
    """Convert power to decibels relative to 1, clipped at ``max - top_db``."""
    log_spec = 10.0 * np.log10(np.maximum(amin, s))
    if top_db is not None:
        log_spec = np.maximum(log_spec, log_spec.max() - top_db)
    return log_spec


def mfcc(samples: Any, sample_rate: int = SAMPLE_RATE, n_mfcc: int = N_MFCC) -> np.ndarray:
    """
    Compute the (n_mfcc, T) MFCC grid of a mono signal, ``T = 1 + len(samples) // 512``.

    Parameters
    ----------
    samples : array-like
        Mono signal at ``sample_rate``.
    sample_rate : int, optional
        Sampling rate, must be 22050 unless a different filterbank is wanted.
    n_mfcc : int, optional
        Number of coefficients kept. Default 39.
    """
    y = np.asarray(samples, dtype=np.float64)
    if y.ndim != 1 or y.size == 0:
        raise ValueError(f"mfcc needs a non-empty 1-d signal, got shape {y.shape}")
    y = np.pad(y, N_FFT // 2, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(y, N_FFT)[::HOP_LENGTH]
    window = get_window("hann", N_FFT, fftbins=True)
    power = np.abs(fft.rfft(frames * window, axis=1)) ** 2
    mel = mel_filterbank(sample_rate) @ power.T
    return fft.dct(power_to_db(mel), type=2, axis=0, norm="ortho")[:n_mfcc]


def fit_frames(grid: np.ndarray, frames: int) -> np.ndarray:
    """
    Center a (C, T) grid in ``frames`` columns.

    Shorter grids are zero padded with ``(frames - T) // 2`` columns on the left and the
    rest on the right. Longer grids are cropped starting at ``(T - frames) // 2``.
    """
    if frames < 1:
        raise ValueError(f"frames={frames} must be positive")
    grid = np.asarray(grid)
    nt = grid.shape[1]
    if nt == frames:
        return grid
    if nt < frames:
        left = (frames - nt) // 2
        return np.pad(grid, ((0, 0), (left, frames - nt - left)))
    start = (nt - frames) // 2
    return grid[:, start : start + frames]


def _check_gender_mode(mode: str) -> str:
    if mode not in GENDER_MODES:
        raise ConfigError(f"gender mode {mode!r} must be one of {GENDER_MODES}")
    return mode


def gender_code(gender: Any) -> float:
    """Encode a gender as injected: 0 for male, 1 for female."""
    if isinstance(gender, str):
        g = gender.strip().upper()
        if g == "M":
            return MALE
        if g == "F":
            return FEMALE
        raise DataError(f"gender must be M or F, got {gender!r}")
    return FEMALE if float(gender) > 0.5 else MALE


def inject_gender(grid: np.ndarray, mode: str, gender_info: Any = None) -> np.ndarray:
    """
    Append constant gender rows to a (C, F) grid.

    Parameters
    ----------
    grid : array of shape (C, F)
    mode : {"none", "golden", "binary", "probabilities"}
        ``golden`` and ``binary`` append one row holding 0 (male) or 1 (female),
        ``probabilities`` appends the rows p_male and p_female.
    gender_info : str, float or (float, float)
        "M"/"F" for the hard modes, the pair (p_male, p_female) for probabilities.
    """
    _check_gender_mode(mode)
    grid = np.asarray(grid)
    if mode == "none":
        return grid
    if gender_info is None:
        raise DataError(f"gender mode {mode!r} needs gender information")
    nf = grid.shape[1]
    if mode == "probabilities":
        pm, pf = gender_info
        rows = np.array([[pm] * nf, [pf] * nf])
    else:
        rows = np.full((1, nf), gender_code(gender_info))
    return np.concatenate([grid, rows.astype(grid.dtype)], axis=0)


def gender_info_for(
    mode: str, sample: Sample, sidecar: Optional[GenderSidecar] = None
) -> Any:
    """Return the gender information that :func:`inject_gender` needs for a row."""
    if mode == "none":
        return None
    if mode == "golden":
        if sample.gender not in ("M", "F"):
            raise DataError(f"utterance {sample.utterance_id!r} has no golden gender")
        return sample.gender
    if sidecar is None:
        raise ConfigError(f"gender mode {mode!r} requires a gender file")
    if mode == "binary":
        return str(sidecar.binary([sample.utterance_id])[0])
    return sidecar[sample.utterance_id]


class FeatureMatrix:
    """Float32 feature grid of one utterance, channels first."""

    __slots__ = ("utterance_id", "values", "gender_mode")

    def __init__(self, utterance_id: str, values: Any, gender_mode: str = "none"):
        self.utterance_id = utterance_id
        self.values = np.ascontiguousarray(values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError(f"feature values must be 2-d, got shape {self.values.shape}")
        self.gender_mode = gender_mode

    @property
    def channels(self) -> int:
        """Get number of rows."""
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        """Get number of columns."""
        return self.values.shape[1]

    def __repr__(self) -> str:
        return (
            f"FeatureMatrix({self.utterance_id!r}, channels={self.channels}, "
            f"frames={self.frames})"
        )


def feature_path(directory: PathLike, utterance_id: str) -> Path:
    return Path(directory) / f"{utterance_id}{FEATURE_SUFFIX}"


def feature_bytes(values: np.ndarray) -> bytes:
    """Encode a (C, F) grid in the feature file format."""
    values = np.asarray(values, dtype="<f4")
    nc, nf = values.shape
    return (
        FEATURE_MAGIC
        + _FEATURE_HEADER.pack(FEATURE_VERSION, nc, nf)
        + values.tobytes(order="C")
    )


def parse_feature_bytes(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    """Decode the feature file format into a float32 (C, F) array."""
    head = len(FEATURE_MAGIC) + _FEATURE_HEADER.size
    if len(raw) < head:
        raise DataError(f"{source}: feature file is truncated")
    if raw[: len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise DataError(f"{source}: not a feature file, bad magic {raw[:4]!r}")
    version, nc, nf = _FEATURE_HEADER.unpack_from(raw, len(FEATURE_MAGIC))
    if version != FEATURE_VERSION:
        raise DataError(f"{source}: unsupported feature file version {version}")
    if len(raw) != head + 4 * nc * nf:
        raise DataError(
            f"{source}: payload of {len(raw) - head} bytes does not match "
            f"{nc} channels x {nf} frames"
        )
    return np.frombuffer(raw, dtype="<f4", offset=head).reshape(nc, nf).astype(np.float32)


def write_features(directory: PathLike, matrix: FeatureMatrix) -> Path:
    """Write ``<directory>/<utterance_id>.tbf`` and return its path."""
    path = feature_path(directory, matrix.utterance_id)
    path.write_bytes(feature_bytes(matrix.values))
    return path


def read_features(
    path: PathLike, utterance_id: Optional[str] = None, gender_mode: str = "none"
) -> FeatureMatrix:
    """
    Read a feature file.

    Pass either the file path, or a directory together with the utterance id.
    """
    path = Path(path)
    if utterance_id is not None:
        path = feature_path(path, utterance_id)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read feature file {path}: {e}") from e
    name = utterance_id if utterance_id is not None else path.stem
    return FeatureMatrix(name, parse_feature_bytes(raw, str(path)), gender_mode)


class ExtractionResult:
    """Outcome of :func:`extract_features`."""

    __slots__ = (
        "frames",
        "frames_source",
        "gender_mode",
        "channels",
        "written",
        "padded",
        "cropped",
        "failures",
    )

    def __init__(self, frames, frames_source, gender_mode):
        self.frames = frames
        self.frames_source = frames_source
        self.gender_mode = gender_mode
        self.channels = N_MFCC + GENDER_ROWS[gender_mode]
        self.written: List[str] = []
        self.padded = 0
        self.cropped = 0
        self.failures: Dict[str, str] = {}

    @property
    def ok(self) -> bool:
        """Whether every utterance was extracted."""
        return not self.failures

    def to_dict(self) -> Dict[str, Any]:
        return {
            "frames": self.frames,
            "frames_source": self.frames_source,
            "gender_mode": self.gender_mode,
            "channels": self.channels,
            "written": len(self.written),
            "padded": self.padded,
            "cropped": self.cropped,
            "failures": dict(sorted(self.failures.items())),
        }

    def __repr__(self) -> str:
        return (
            f"ExtractionResult(frames={self.frames}, written={len(self.written)}, "
            f"failures={len(self.failures)})"
        )


def _utterance_mfcc(sample: Sample) -> np.ndarray:
    samples, rate = load_audio(sample.audio_path)
    return mfcc(samples, rate)


def extract_features(
    manifest: DatasetManifest,
    out_dir: PathLike,
    frames: Optional[int] = None,
    gender_mode: str = "none",
    sidecar: Optional[GenderSidecar] = None,
    jobs: int = 1,
    verbose: int = 0,
) -> ExtractionResult:
    """
    Turn every manifest row into a fixed-size feature file.

    Utterances that cannot be processed are recorded in the result and skipped, the
    others are still written. When ``frames`` is None the 95th percentile of the MFCC
    lengths is used and a :class:`FrameCountWarning` is emitted. A feature index and
    the extraction record are written to ``features.json`` and ``extract_log.json``.

    Parameters
    ----------
    manifest : DatasetManifest
    out_dir : path
        Created if needed.
    frames : int, optional
        Fixed number of frames F.
    gender_mode : {"none", "golden", "binary", "probabilities"}
    sidecar : GenderSidecar, optional
        Required for the binary and probabilities modes.
    jobs : int, optional
        Number of worker threads for MFCC computation.
    verbose : int, optional
        Print progress when positive.
    """
    _check_gender_mode(gender_mode)
    if gender_mode in ("binary", "probabilities") and sidecar is None:
        raise ConfigError(f"gender mode {gender_mode!r} requires a gender file")
    if frames is not None and frames < 1:
        raise ConfigError(f"frames={frames} must be positive")
    if jobs < 1:
        raise ConfigError(f"jobs={jobs} must be positive")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    samples = list(manifest)
    if not samples:
        warnings.warn("manifest is empty, no features written", ExtractionWarning)

    def work(sample):
        try:
            return _utterance_mfcc(sample), None
        except (DataError, ValueError) as e:
            return None, str(e)

    if jobs > 1 and len(samples) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(work, samples))
        if verbose:
            print(f"computed MFCCs of {len(samples)} utterances with {jobs} threads")
    else:
        outcomes = []
        for i, s in enumerate(samples):
            outcomes.append(work(s))
            if verbose >= 2:
                print(f"[{i + 1}/{len(samples)}] {s.utterance_id}")

    grids = {}
    failures = {}
    for s, (grid, err) in zip(samples, outcomes):
        if err is None:
            grids[s.utterance_id] = grid
        else:
            failures[s.utterance_id] = err

    source = "configured"
    if frames is None:
        lengths = [g.shape[1] for g in grids.values()]
        frames = int(np.ceil(np.percentile(lengths, 95))) if lengths else 0
        source = "p95"
        if lengths:
            warnings.warn(
                f"frame count not configured, using the 95th percentile {frames}",
                FrameCountWarning,
            )

    result = ExtractionResult(frames, source, gender_mode)
    for s in samples:
        grid = grids.get(s.utterance_id)
        if grid is None:
            continue
        try:
            info = gender_info_for(gender_mode, s, sidecar)
        except DataError as e:
            failures[s.utterance_id] = str(e)
            continue
        if grid.shape[1] < frames:
            result.padded += 1
        elif grid.shape[1] > frames:
            result.cropped += 1
        values = inject_gender(fit_frames(grid, frames), gender_mode, info)
        write_features(out_dir, FeatureMatrix(s.utterance_id, values, gender_mode))
        result.written.append(s.utterance_id)
    result.failures = failures

    for uid, msg in sorted(failures.items()):
        warnings.warn(f"skipped {uid}: {msg}", ExtractionWarning)
    if verbose:
        print(
            f"wrote {len(result.written)} feature files to {out_dir} "
            f"(frames={frames}, padded={result.padded}, cropped={result.cropped}, "
            f"failed={len(failures)})"
        )
    index = {
        "frames": frames,
        "gender_mode": gender_mode,
        "channels": result.channels,
        "utterances": len(result.written),
    }
    for name, content in ((INDEX_FILE, index), (LOG_FILE, result.to_dict())):
        with open(out_dir / name, "w", encoding="utf-8") as f:
            json.dump(content, f, indent=2, sort_keys=True)
    return result


class FeatureSet:
    """
    Stacked features with labels and metadata, the input of training and evaluation.

    Attributes
    ----------
    X : array of shape (N, C, F), float32
    y : array of shape (N,), int64
    ids, speakers, genders : arrays of shape (N,)
        Genders are "M", "F" or "?".
    label_set : tuple of str
    gender_mode : str
    """

    __slots__ = ("X", "y", "ids", "speakers", "genders", "label_set", "gender_mode")

    def __init__(
        self,
        X: np.ndarray,
        y: Any,
        ids: Sequence[str],
        label_set: Sequence[str],
        speakers: Optional[Sequence[str]] = None,
        genders: Optional[Sequence[str]] = None,
        gender_mode: str = "none",
    ):
        self.X = np.asarray(X)
        if self.X.ndim != 3:
            raise DataError(f"features must have shape (N, C, F), got {self.X.shape}")
        n = self.X.shape[0]
        self.y = np.asarray(y, dtype=np.int64)
        self.ids = np.asarray(list(ids), dtype=object)
        if speakers is None:
            speakers = [""] * n
        if genders is None:
            genders = ["?"] * n
        self.speakers = np.asarray(list(speakers), dtype=object)
        self.genders = np.asarray(list(genders), dtype=object)
        if not (len(self.y) == len(self.ids) == len(self.speakers) == len(self.genders) == n):
            raise DataError("features, labels and metadata disagree in length")
        self.label_set = tuple(label_set)
        self.gender_mode = gender_mode

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def n_channels(self) -> int:
        """Get number of feature rows C."""
        return self.X.shape[1]

    @property
    def frames(self) -> int:
        """Get number of frames F."""
        return self.X.shape[2]

    @property
    def n_classes(self) -> int:
        """Get size of the label set."""
        return len(self.label_set)

    def subset(self, index: Any) -> "FeatureSet":
        """Return rows selected by an integer or boolean index."""
        index = np.asarray(index)
        return FeatureSet(
            self.X[index],
            self.y[index],
            self.ids[index],
            self.label_set,
            self.speakers[index],
            self.genders[index],
            self.gender_mode,
        )

    def gender_subset(self, gender: str) -> "FeatureSet":
        """Return the rows with golden gender "M" or "F"."""
        if gender not in ("M", "F"):
            raise ValueError(f"gender must be 'M' or 'F', got {gender!r}")
        return self.subset(self.genders == gender)

    def inject_gender(
        self, mode: str, sidecar: Optional[GenderSidecar] = None
    ) -> "FeatureSet":
        """Return a copy with gender rows appended to features without gender rows."""
        _check_gender_mode(mode)
        if self.gender_mode != "none":
            raise ConfigError(f"features already carry {self.gender_mode!r} gender rows")
        if mode == "none":
            return self
        X = []
        for i in range(len(self)):
            s = Sample(
                self.ids[i], "", self.label_set[self.y[i]], self.speakers[i], self.genders[i]
            )
            X.append(inject_gender(self.X[i], mode, gender_info_for(mode, s, sidecar)))
        if X:
            X = np.stack(X)
        else:
            X = np.zeros((0, self.n_channels + GENDER_ROWS[mode], self.frames), np.float32)
        return FeatureSet(
            X,
            self.y,
            self.ids,
            self.label_set,
            self.speakers,
            self.genders,
            mode,
        )

    def __repr__(self) -> str:
        return (
            f"FeatureSet(N={len(self)}, channels={self.n_channels}, frames={self.frames}, "
            f"classes={self.n_classes}, gender_mode={self.gender_mode!r})"
        )


def load_feature_set(manifest: DatasetManifest, feature_dir: PathLike) -> FeatureSet:
    """
    Read the feature files of all manifest rows.

    The gender mode is taken from the ``features.json`` index when present.
    """
    feature_dir = Path(feature_dir)
    gender_mode = "none"
    index = feature_dir / INDEX_FILE
    if index.exists():
        try:
            meta = json.loads(index.read_text(encoding="utf-8"))
        except ValueError as e:
            raise DataError(f"{index}: corrupt feature index: {e}") from e
        gender_mode = meta.get("gender_mode", "none")
    missing = [
        s.utterance_id
        for s in manifest
        if not feature_path(feature_dir, s.utterance_id).exists()
    ]
    if missing:
        raise DataError(
            f"{len(missing)} feature files missing in {feature_dir}: {missing[:5]}"
            + (" ..." if len(missing) > 5 else "")
        )
    if len(manifest) == 0:
        raise DataError(f"manifest has no utterances to load from {feature_dir}")
    grids = [read_features(feature_dir, s.utterance_id).values for s in manifest]
    shapes = {g.shape for g in grids}
    if len(shapes) > 1:
        raise DataError(
            f"feature files in {feature_dir} have different shapes {sorted(shapes)}"
        )
    return FeatureSet(
        np.stack(grids),
        manifest.labels,
        manifest.ids,
        manifest.label_set,
        [s.speaker for s in manifest],
        [s.gender for s in manifest],
        gender_mode,
    )
