"""Hybrid-level diffusion fine-tuning at desk scale.

Text-conditioned diffusion-transformer training with LoRA adapters, a
differentiable classifier-free-guided DPM-Solver++ sampler embedded in the
training loop, an interval-scheduled color-consistency objective, a
VLM-driven caption pipeline, and Frechet/kernel generative metrics.
"""

__version__ = "0.1.0"
