"""Scene anomaly detection with reverse distillation, student attention modules and
novel-view augmentation."""

__version__ = "0.1.0"
