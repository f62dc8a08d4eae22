"""Gait knowledge maps and multimodal transformer screening for scoliosis, with a synthetic gait simulator."""

__version__ = "0.1.0"
