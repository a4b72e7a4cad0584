"""Cross-lingual encoder pre-training with masked-language and contrastive alignment objectives,
built on a small numpy autodiff engine."""

__version__ = "0.1.0"
