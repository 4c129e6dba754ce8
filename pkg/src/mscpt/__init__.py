"""Few-shot weakly supervised bag classification with multi-scale, cross-modal prompt tuning."""

__version__ = "0.1.0"
