"""Speech emotion recognition with temporal-aware bi-direction multi-scale networks.

Basic usage example::

    from tbdmnet import ModelConfig, TrainConfig, crossval
    from tbdmnet.features import read_manifest, extract_features, load_feature_set

    manifest = read_manifest("ravdess.csv", preset="ravdess")
    extract_features(manifest, "features/ravdess", frames=None)
    data = load_feature_set(manifest, "features/ravdess")

    bt, final = crossval(
        data,
        ModelConfig(n_classes=data.n_classes, input_channels=data.n_channels),
        TrainConfig(epochs=300, seed=0),
    )
    print(final)  # per-fold UAR, WAR and F1

The same steps are available on the command line as ``tbdmnet extract`` and
``tbdmnet crossval``.
"""

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "train",
    "crossval",
    "evaluate",
    "load_checkpoint",
    "save_checkpoint",
    "compute_metrics",
    "__version__",
]

from .version import version as __version__
from .model import ModelConfig
from .train import TrainConfig, train, crossval, evaluate
from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import compute_metrics
