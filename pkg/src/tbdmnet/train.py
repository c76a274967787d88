"""
Training, cross-validation, gender-aware systems and ablations.

Training minimizes the softmax cross entropy with Adam for a fixed number of epochs and
keeps two snapshots: the parameters after the epoch with the highest eval-mode training
accuracy (``BT``, earliest epoch on ties) and the parameters after the last epoch
(``FINAL``). A fixed seed makes every run bit-reproducible; folds of a cross-validation
are trained with seed ``seed + fold`` so they can run in parallel threads.
"""
import warnings
from concurrent.futures import ThreadPoolExecutor
import numpy as np
from typing import Any, Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

from .features import GENDER_ROWS, N_MFCC, FeatureSet, GenderSidecar
from .metrics import FoldMetrics, MetricsReport, compute_metrics
from .model import ModelConfig, ModelParams, build, forward, predict_proba
from .tensor import Tape, Tensor, backward, softmax_cross_entropy
from .util import ConfigError, DataError, NumericError, PerformanceWarning, Settings

DTYPES = ("float32", "float64")

GENDER_SYSTEMS = (
    "baseline_full",
    "baseline_M_eval",
    "baseline_F_eval",
    "split_M",
    "split_F",
    "posthoc_golden",
    "posthoc_binary",
    "posthoc_probabilities",
    "prehoc_golden",
    "prehoc_binary",
    "prehoc_probabilities",
)

ABLATIONS = ("relu", "no_bd", "no_ms", "tabs5")


class TrainConfig(Settings):
    """
    Optimization hyperparameters.

    Parameters
    ----------
    epochs : int, optional
        Default 300.
    lr : float, optional
        Adam learning rate. Default 0.001.
    beta1, beta2, eps : float, optional
        Adam moment decay rates and denominator offset.
    batch_size : int, optional
        Default 64. The last batch of an epoch may be smaller.
    seed : int, optional
        Seeds initialization, shuffling and dropout. Default 0.
    shuffle_each_epoch : bool, optional
        Default True.
    dtype : {"float32", "float64"}, optional
        Training precision. Default float32.
    verbose : int, optional
        0 is silent, 1 prints one line per epoch, 2 also per batch.
    eval_batch_size : int, optional
        Batch size of evaluation passes. Default 256.
    """

    __slots__ = (
        "epochs",
        "lr",
        "beta1",
        "beta2",
        "eps",
        "batch_size",
        "seed",
        "shuffle_each_epoch",
        "dtype",
        "verbose",
        "eval_batch_size",
    )

    def __init__(
        self,
        epochs: int = 300,
        lr: float = 0.001,
        beta1: float = 0.93,
        beta2: float = 0.98,
        eps: float = 1e-8,
        batch_size: int = 64,
        seed: int = 0,
        shuffle_each_epoch: bool = True,
        dtype: str = "float32",
        verbose: int = 0,
        eval_batch_size: int = 256,
    ):
        self.epochs = epochs
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.batch_size = batch_size
        self.seed = seed
        self.shuffle_each_epoch = shuffle_each_epoch
        self.dtype = dtype
        self.verbose = verbose
        self.eval_batch_size = eval_batch_size
        self.validate()

    def validate(self) -> None:
        """Raise :class:`ConfigError` if any field is out of range."""
        for name in ("epochs", "batch_size", "eval_batch_size"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name}={v!r} must be a positive integer")
        if not self.lr > 0:
            raise ConfigError(f"lr={self.lr} must be positive")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ConfigError(f"{name}={v} must be in (0, 1)")
        if not self.eps > 0:
            raise ConfigError(f"eps={self.eps} must be positive")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype {self.dtype!r} must be one of {DTYPES}")
        if not isinstance(self.seed, (int, np.integer)):
            raise ConfigError(f"seed={self.seed!r} must be an integer")


class AdamState:
    """First and second moment estimates per parameter name."""

    __slots__ = ("m", "v")

    def __init__(self):
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, Optional[np.ndarray]],
    state: AdamState,
    cfg: TrainConfig,
    t: int,
) -> None:
    """
    Apply one bias-corrected Adam update in place.

    Parameters without a gradient are left untouched.

    Parameters
    ----------
    params : mapping of name to array
        Updated in place.
    grads : mapping of name to array or None
    state : AdamState
        Moments, created on first use.
    cfg : TrainConfig
        Provides lr, beta1, beta2, eps.
    t : int
        1-based step number.
    """
    if t < 1:
        raise ValueError(f"step number t={t} must be at least 1")
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    # all gradients are checked before any state changes
    for name in params:
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r} at step {t}")
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        theta -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


class FoldPlan:
    """
    Assignment of utterance ids to cross-validation folds.

    Folds partition the ids and their sizes differ by at most one.
    """

    __slots__ = ("n_folds", "seed", "assignment")

    def __init__(self, n_folds: int, seed: int, assignment: Dict[str, int]):
        self.n_folds = n_folds
        self.seed = seed
        self.assignment = assignment

    def __len__(self) -> int:
        return self.n_folds

    def fold_of(self, uid: str) -> int:
        try:
            return self.assignment[uid]
        except KeyError:
            raise DataError(f"utterance {uid!r} is not part of the fold plan") from None

    def test_ids(self, k: int) -> List[str]:
        """Return ids of fold k in plan order."""
        return [u for u, f in self.assignment.items() if f == k]

    def test_mask(self, ids: Sequence[str], k: int) -> np.ndarray:
        """Return boolean mask over ids selecting fold k."""
        return np.array([self.fold_of(u) == k for u in ids], dtype=bool)

    def sizes(self) -> List[int]:
        """Return number of ids per fold."""
        counts = np.bincount(list(self.assignment.values()), minlength=self.n_folds)
        return [int(x) for x in counts]

    def restrict(self, ids: Sequence[str]) -> "FoldPlan":
        """Return the plan limited to ids, keeping their fold numbers."""
        return FoldPlan(self.n_folds, self.seed, {u: self.fold_of(u) for u in ids})

    def __repr__(self) -> str:
        return f"<FoldPlan n_folds={self.n_folds} seed={self.seed} sizes={self.sizes()}>"


def kfold_split(ids: Sequence[str], n_folds: int = 10, seed: int = 0) -> FoldPlan:
    """
    Shuffle ids with a seeded permutation and deal them to folds round-robin.

    Speakers are not kept together.
    """
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise DataError("utterance ids must be unique")
    if n_folds < 2:
        raise ConfigError(f"folds={n_folds} must be at least 2")
    if len(ids) < n_folds:
        raise ConfigError(f"cannot split {len(ids)} utterances into {n_folds} folds")
    perm = np.random.default_rng(seed).permutation(len(ids))
    return FoldPlan(n_folds, seed, {ids[j]: i % n_folds for i, j in enumerate(perm)})


class EpochRecord:
    """Mean training loss and eval-mode training accuracy (WAR, percent) of an epoch."""

    __slots__ = ("epoch", "loss", "war")

    def __init__(self, epoch: int, loss: float, war: float):
        self.epoch = epoch
        self.loss = loss
        self.war = war

    def to_dict(self) -> Dict[str, Any]:
        return {"epoch": self.epoch, "loss": self.loss, "war": self.war}

    def __repr__(self) -> str:
        return f"EpochRecord(epoch={self.epoch}, loss={self.loss:.6g}, war={self.war:.4g})"


class TrainResult:
    """Snapshots and history of one training run."""

    __slots__ = ("config", "ckpt_bt", "ckpt_final", "best_epoch", "history")

    def __init__(
        self,
        config: ModelConfig,
        ckpt_bt: ModelParams,
        ckpt_final: ModelParams,
        best_epoch: int,
        history: List[EpochRecord],
    ):
        self.config = config
        self.ckpt_bt = ckpt_bt
        self.ckpt_final = ckpt_final
        self.best_epoch = best_epoch
        self.history = history

    def checkpoint(self, kind: str) -> ModelParams:
        """Return the "BT" or "FINAL" snapshot."""
        if kind == "BT":
            return self.ckpt_bt
        if kind == "FINAL":
            return self.ckpt_final
        raise ValueError(f"checkpoint kind {kind!r} must be 'BT' or 'FINAL'")

    def history_dict(self) -> Dict[str, Any]:
        return {
            "model_config_hash": self.config.hash(),
            "best_epoch": self.best_epoch,
            "epochs": [r.to_dict() for r in self.history],
        }

    def __repr__(self) -> str:
        return f"<TrainResult epochs={len(self.history)} best_epoch={self.best_epoch}>"


def _check_dataset(dataset: FeatureSet, config: ModelConfig) -> None:
    if len(dataset) == 0:
        raise DataError("training set is empty")
    if dataset.n_channels != config.input_channels:
        raise ConfigError(
            f"features have {dataset.n_channels} channels but the model expects "
            f"input_channels={config.input_channels}"
        )
    if dataset.y.max() >= config.n_classes:
        raise ConfigError(
            f"labels go up to {dataset.y.max()} but the model has {config.n_classes} classes"
        )


def train(dataset: FeatureSet, model_cfg: ModelConfig, train_cfg: TrainConfig) -> TrainResult:
    """
    Train a freshly built model on a feature set.

    Parameters
    ----------
    dataset : FeatureSet
        Training utterances.
    model_cfg : ModelConfig
    train_cfg : TrainConfig

    Returns
    -------
    TrainResult
        ``ckpt_bt`` is the snapshot after the earliest epoch with the highest training
        accuracy, ``ckpt_final`` the parameters after the last epoch.

    Raises
    ------
    NumericError
        If a loss or gradient becomes non-finite.
    """
    model_cfg.validate()
    train_cfg.validate()
    _check_dataset(dataset, model_cfg)
    dtype = np.dtype(train_cfg.dtype)
    if dtype == np.float64:
        warnings.warn("training in float64 is slow", PerformanceWarning, stacklevel=2)

    rng = np.random.default_rng(train_cfg.seed)
    params = build(model_cfg, rng, dtype)
    named = params.named_parameters()
    arrays = {name: t.data for name, t in named}
    state = AdamState()
    X = dataset.X.astype(dtype, copy=False)
    y = dataset.y
    n = len(y)
    bs = train_cfg.batch_size
    step = 0
    best_war = -1.0
    best_epoch = 0
    bt = params
    history = []
    order = np.arange(n)
    for epoch in range(1, train_cfg.epochs + 1):
        if train_cfg.shuffle_each_epoch:
            order = rng.permutation(n)
        total = 0.0
        for batch, start in enumerate(range(0, n, bs)):
            idx = order[start : start + bs]
            params.zero_grad()
            with Tape():
                logits, _ = forward(Tensor(X[idx]), params, model_cfg, "train", rng)
                loss, _ = softmax_cross_entropy(logits, y[idx])
                backward(loss)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
            step += 1
            adam_step(arrays, {name: t.grad for name, t in named}, state, train_cfg, step)
            total += value * len(idx)
            if train_cfg.verbose >= 2:
                print(f"epoch {epoch} batch {batch}: loss {value:.6g}")
        probs = predict_proba(params, model_cfg, X, train_cfg.eval_batch_size)
        war = compute_metrics(probs.argmax(axis=1), y, model_cfg.n_classes).war
        history.append(EpochRecord(epoch, total / n, war))
        if war > best_war:
            best_war = war
            best_epoch = epoch
            bt = params.copy()
        if train_cfg.verbose >= 1:
            print(
                f"epoch {epoch}/{train_cfg.epochs}: loss {total / n:.6g} train WAR {war:.2f}"
            )
    return TrainResult(model_cfg, bt, params.copy(), best_epoch, history)


def evaluate(
    params: ModelParams,
    config: ModelConfig,
    dataset: FeatureSet,
    batch_size: int = 256,
) -> Tuple[np.ndarray, np.ndarray]:
    """Return eval-mode predictions and probabilities for a feature set."""
    if dataset.n_channels != config.input_channels:
        raise DataError(
            f"features have {dataset.n_channels} channels but the model expects "
            f"{config.input_channels}"
        )
    probs = predict_proba(params, config, dataset.X, batch_size)
    return probs.argmax(axis=1), probs


class CrossvalResult:
    """
    Reports of both checkpoint kinds, iterable as ``bt, final``.

    ``models`` holds the per-fold :class:`TrainResult` objects when requested.
    """

    __slots__ = ("bt", "final", "models")

    def __init__(self, bt: MetricsReport, final: MetricsReport, models: List[TrainResult]):
        self.bt = bt
        self.final = final
        self.models = models

    def __iter__(self) -> Iterator[MetricsReport]:
        return iter((self.bt, self.final))

    def report(self, kind: str) -> MetricsReport:
        return self.bt if kind == "BT" else self.final


def _map_folds(fn: Callable[[int], Any], n_folds: int, jobs: int) -> List[Any]:
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, range(n_folds)))
    return [fn(k) for k in range(n_folds)]


def _fold_config(train_cfg: TrainConfig, k: int) -> TrainConfig:
    return train_cfg.replace(seed=train_cfg.seed + k)


def _plan_for(dataset: FeatureSet, plan: Optional[FoldPlan], n_folds: int, seed: int):
    if plan is None:
        return kfold_split(list(dataset.ids), n_folds, seed)
    return plan


def crossval(
    dataset: FeatureSet,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    plan: Optional[FoldPlan] = None,
    jobs: int = 1,
    dataset_name: Optional[str] = None,
    tag: str = "",
    keep_models: bool = False,
) -> CrossvalResult:
    """
    Train one model per fold and score both snapshots on the held-out fold.

    Parameters
    ----------
    dataset : FeatureSet
    model_cfg : ModelConfig
    train_cfg : TrainConfig
        Fold k trains with seed ``train_cfg.seed + k``.
    plan : FoldPlan, optional
        Default is a 10-fold split seeded with ``train_cfg.seed``.
    jobs : int, optional
        Number of folds trained in parallel threads. Results do not depend on it.
    dataset_name, tag : str, optional
        Copied into the reports.
    keep_models : bool, optional
        Keep the per-fold training results.
    """
    plan = _plan_for(dataset, plan, 10, train_cfg.seed)
    ids = list(dataset.ids)

    def run(k):
        test = plan.test_mask(ids, k)
        if not test.any() or test.all():
            raise DataError(f"fold {k} leaves no training or no test utterances")
        result = train(dataset.subset(~test), model_cfg, _fold_config(train_cfg, k))
        held_out = dataset.subset(test)
        scores = {}
        for kind in ("BT", "FINAL"):
            preds, _ = evaluate(
                result.checkpoint(kind), model_cfg, held_out, train_cfg.eval_batch_size
            )
            m = compute_metrics(preds, held_out.y, model_cfg.n_classes, dataset.label_set)
            scores[kind] = FoldMetrics.from_metrics(k, m)
        return scores, result

    outcomes = _map_folds(run, plan.n_folds, jobs)
    reports = [
        MetricsReport(
            dataset_name,
            model_cfg.hash(),
            kind,
            dataset.label_set,
            [scores[kind] for scores, _ in outcomes],
            tag,
        )
        for kind in ("BT", "FINAL")
    ]
    models = [r for _, r in outcomes] if keep_models else []
    return CrossvalResult(reports[0], reports[1], models)


def posthoc_mix(
    probs_male: np.ndarray, probs_female: np.ndarray, p_male: Any, p_female: Any
) -> np.ndarray:
    """Mix the class probabilities of two gender-dependent models by gender probability."""
    p_male = np.asarray(p_male, dtype=np.float64)[:, None]
    p_female = np.asarray(p_female, dtype=np.float64)[:, None]
    return p_male * probs_male + p_female * probs_female


def _golden_genders(dataset: FeatureSet, what: str) -> None:
    unknown = [u for u, g in zip(dataset.ids, dataset.genders) if g not in ("M", "F")]
    if unknown:
        raise DataError(
            f"{what} needs golden genders, {len(unknown)} utterances have none: {unknown[:5]}"
        )


def _report(dataset, model_cfg, folds, dataset_name, tag) -> MetricsReport:
    return MetricsReport(
        dataset_name, model_cfg.hash(), "FINAL", dataset.label_set, folds, tag
    )


def run_gender_system(
    system: str,
    dataset: FeatureSet,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    sidecar: Optional[GenderSidecar] = None,
    plan: Optional[FoldPlan] = None,
    n_folds: int = 10,
    jobs: int = 1,
    dataset_name: Optional[str] = None,
) -> MetricsReport:
    """
    Cross-validate one gender-aware system and report the final checkpoints.

    Systems
    -------
    baseline_full
        Plain model on all utterances.
    baseline_M_eval, baseline_F_eval
        Plain model trained on all utterances, scored on one gender of the test fold.
    split_M, split_F
        Train and test on one gender only.
    posthoc_golden, posthoc_binary, posthoc_probabilities
        Two models trained on male and female utterances. Test utterances are routed by
        golden gender or by the thresholded sidecar probabilities, or the two class
        distributions are mixed with the sidecar probabilities.
    prehoc_golden, prehoc_binary, prehoc_probabilities
        One model on features with injected gender rows; the feature set must have been
        extracted with the matching gender mode.
    """
    if system not in GENDER_SYSTEMS:
        raise ConfigError(
            f"unknown gender system {system!r}, expected one of {GENDER_SYSTEMS}"
        )
    kind, _, variant = system.partition("_")

    if kind == "prehoc":
        if dataset.gender_mode != variant:
            raise ConfigError(
                f"{system} needs features with {N_MFCC + GENDER_ROWS[variant]} channels "
                f"({variant} gender rows), got {dataset.n_channels} channels with "
                f"gender mode {dataset.gender_mode!r}"
            )
        cfg = model_cfg.replace(input_channels=dataset.n_channels)
        plan = _plan_for(dataset, plan, n_folds, train_cfg.seed)
        return crossval(dataset, cfg, train_cfg, plan, jobs, dataset_name, system).final

    if kind == "split":
        _golden_genders(dataset, system)
        subset = dataset.gender_subset(variant)
        if plan is not None:
            plan = plan.restrict(list(subset.ids))
        else:
            plan = kfold_split(list(subset.ids), n_folds, train_cfg.seed)
        return crossval(subset, model_cfg, train_cfg, plan, jobs, dataset_name, system).final

    plan = _plan_for(dataset, plan, n_folds, train_cfg.seed)
    if system == "baseline_full":
        return crossval(dataset, model_cfg, train_cfg, plan, jobs, dataset_name, system).final

    ids = list(dataset.ids)
    if kind == "baseline":
        gender = variant[0]
        _golden_genders(dataset, system)

        def run(k):
            test = plan.test_mask(ids, k)
            result = train(dataset.subset(~test), model_cfg, _fold_config(train_cfg, k))
            held_out = dataset.subset(test & (dataset.genders == gender))
            if len(held_out) == 0:
                return None
            preds, _ = evaluate(result.ckpt_final, model_cfg, held_out)
            m = compute_metrics(preds, held_out.y, model_cfg.n_classes, dataset.label_set)
            return FoldMetrics.from_metrics(k, m)

        folds = [f for f in _map_folds(run, plan.n_folds, jobs) if f is not None]
        return _report(dataset, model_cfg, folds, dataset_name, system)

    # posthoc
    _golden_genders(dataset, system)
    if variant != "golden":
        if sidecar is None:
            raise ConfigError(f"{system} requires a gender file")
        sidecar.probabilities(ids)

    def run(k):
        test = plan.test_mask(ids, k)
        models = {}
        for g in ("M", "F"):
            part = dataset.subset(~test & (dataset.genders == g))
            if len(part) == 0:
                raise DataError(f"fold {k} has no {g} training utterances")
            models[g] = train(part, model_cfg, _fold_config(train_cfg, k)).ckpt_final
        held_out = dataset.subset(test)
        _, pm = evaluate(models["M"], model_cfg, held_out)
        _, pf = evaluate(models["F"], model_cfg, held_out)
        if variant == "probabilities":
            probs = posthoc_mix(pm, pf, *sidecar.probabilities(list(held_out.ids)))
        else:
            if variant == "golden":
                female = held_out.genders == "F"
            else:
                female = sidecar.binary(list(held_out.ids)) == "F"
            probs = np.where(female[:, None], pf, pm)
        m = compute_metrics(
            probs.argmax(axis=1), held_out.y, model_cfg.n_classes, dataset.label_set
        )
        return FoldMetrics.from_metrics(k, m)

    folds = _map_folds(run, plan.n_folds, jobs)
    return _report(dataset, model_cfg, folds, dataset_name, system)


def ablation_config(variant: str, config: ModelConfig) -> ModelConfig:
    """
    Return the configuration of an ablation variant.

    ``relu`` swaps the activation, ``no_bd`` drops the reverse direction, ``no_ms`` uses
    only the deepest scale and ``tabs5`` removes the last block with its dilation.
    """
    if variant == "relu":
        return config.replace(activation="relu")
    if variant == "no_bd":
        return config.replace(bidirectional=False)
    if variant == "no_ms":
        return config.replace(multiscale=False)
    if variant == "tabs5":
        if config.n_tabs < 2:
            raise ConfigError("tabs5 needs a model with at least two blocks")
        return config.replace(n_tabs=config.n_tabs - 1, dilations=config.dilations[:-1])
    raise ConfigError(f"unknown ablation {variant!r}, expected one of {ABLATIONS}")


def run_ablation(
    variant: str,
    dataset: FeatureSet,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    plan: Optional[FoldPlan] = None,
    n_folds: int = 10,
    jobs: int = 1,
    dataset_name: Optional[str] = None,
) -> MetricsReport:
    """Cross-validate an ablation variant and report the final checkpoints."""
    cfg = ablation_config(variant, model_cfg)
    plan = _plan_for(dataset, plan, n_folds, train_cfg.seed)
    return crossval(dataset, cfg, train_cfg, plan, jobs, dataset_name, variant).final
