"""Misalignment-tolerant multi-modal image-to-image translation.

Submodules: data (containers and I/O), synth (phantoms and corruption),
registration (coarse-to-fine warping), detector (misalignment error maps
and confidence weights), translation (prior-regularized cycle GAN),
evaluation (metrics and ablation), pipeline/cli (orchestration).
"""

__version__ = "0.1.0"
