"""Two-stage fence-occlusion removal at desk scale.

A segmentation network finds fence-like occluders in a photograph; a
dual-discriminator generative inpainting network fills the occluded pixels.
Both run on the package's own float64 autodiff engine, so every gradient is
checkable against finite differences.
"""

from .tensor import Rng, Tape, Tensor, grad_check

__all__ = ["Tensor", "Tape", "Rng", "grad_check"]
__version__ = "0.1.0"


def __getattr__(name):
    # heavier subsystems load lazily so `import defencekit` stays light
    import importlib

    for module in ("models", "losses", "metrics", "data", "train", "config"):
        mod = importlib.import_module(f".{module}", __name__)
        if hasattr(mod, name):
            return getattr(mod, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
