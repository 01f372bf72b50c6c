"""scenekd: compact acoustic scene classifiers trained by ensemble-guided
distillation, with an int8 inference path and energy-adaptive augmentation."""

__version__ = "0.1.0"
