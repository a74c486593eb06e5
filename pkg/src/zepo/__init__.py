"""Inversion-free few-step portrait stylization engine.

Fuses content and style features inside self-attention during a short
re-noise/predict sampling loop, with token merging for compute parity
and an instrumented benchmark harness.
"""

__version__ = "0.1.0"
