"""Audio-visual grounding models, layer-wise feature distillation and
invariance probing, built on a small numpy autodiff engine."""

__version__ = "0.1.0"
