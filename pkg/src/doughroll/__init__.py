"""Differentiable 2-D dough rolling toolkit.

Subpackages: scene generation, an elastoplastic MPM simulator with
reverse-mode gradients, point-cloud objectives, trajectory optimizers with a
differentiable tool-reset mechanism, demonstration datasets, a point-cloud
behavior-cloned policy, and an evaluation harness.
"""

import jax

# Double precision must be switched on before any jax.numpy array is created;
# f32 mode is handled by casting, not by this flag.
jax.config.update("jax_enable_x64", True)
jax.config.update("jax_platform_name", "cpu")

__version__ = "0.1.0"
