"""Hybrid physiological / state-space blood glucose forecasting."""

from jax import config as _jax_config

# Long unrolled trajectories need 64-bit accumulation.
_jax_config.update("jax_enable_x64", True)

__version__ = "0.1.0"
