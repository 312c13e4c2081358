"""Multimodal image fusion with an LGCA-pooled convolutional autoencoder.

Submodules are imported lazily so the CLI can pin BLAS thread counts before
numpy loads.
"""

from importlib import import_module

__version__ = "0.1.0"

_EXPORTS = {
    "Tensor": "tensor",
    "no_grad": "tensor",
    "set_nan_checks": "tensor",
    "ConvParams": "conv",
    "GaussianKernel": "conv",
    "SEBlockParams": "attention",
    "LGCALayerParams": "attention",
    "PoolingMode": "attention",
    "CAEModel": "model",
    "TrainConfig": "model",
    "init_model": "model",
    "train": "model",
    "save_checkpoint": "model",
    "load_checkpoint": "model",
    "SourcePair": "fusion",
    "FusionResult": "fusion",
    "fuse_pair": "fusion",
    "MetricReport": "metrics",
    "compute_metrics": "metrics",
}


def __getattr__(name):
    mod = _EXPORTS.get(name)
    if mod is None:
        raise AttributeError(f"module 'lgcafuse' has no attribute '{name}'")
    return getattr(import_module(f".{mod}", __name__), name)
