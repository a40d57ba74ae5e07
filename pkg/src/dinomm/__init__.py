"""Desk-scale SAR-optical self-distillation (DINO with RandomSensorDrop) on a numpy autodiff core."""

__version__ = "0.1.0"
