"""Neural link from latent states to positive time-varying simulator parameters.

A two-hidden-layer (128, 128) relu MLP whose outputs pass through an anchored
softplus so that a zero raw output reproduces the anchor (default) parameter
values exactly. With a zero-initialized output layer, training therefore
starts at the static simulator.
"""

from __future__ import annotations

import math

import jax.numpy as jnp
import numpy as np

HIDDEN = 128

# softplus(x + C) with C = ln(e - 1) passes through 1 at x = 0.
_ANCHOR_SHIFT = math.log(math.e - 1.0)


def softplus_unit(x):
    return jnp.logaddexp(x + _ANCHOR_SHIFT, 0.0)


def init_link(D: int, K: int, seed: int, hidden: int = HIDDEN) -> dict:
    """Fan-in-scaled uniform hidden layers; zero output layer."""
    if D < 1 or K < 1:
        raise ValueError("D and K must be >= 1")
    rng = np.random.default_rng(seed)

    def uniform(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return {
        "W1": uniform(D, (hidden, D)),
        "b1": uniform(D, (hidden,)),
        "W2": uniform(hidden, (hidden, hidden)),
        "b2": uniform(hidden, (hidden,)),
        "W3": np.zeros((K, hidden)),
        "b3": np.zeros(K),
    }


def raw_output(z, phi: dict):
    """MLP forward pass before the positivity transform. Accepts a single
    D-vector or a batch (T, D)."""
    z = jnp.asarray(z)
    h = jnp.maximum(z @ phi["W1"].T + phi["b1"], 0.0)
    h = jnp.maximum(h @ phi["W2"].T + phi["b2"], 0.0)
    return h @ phi["W3"].T + phi["b3"]


def link(z, phi: dict, anchors):
    """Positive dynamic parameter values, anchored at the defaults."""
    anchors = jnp.asarray(anchors)
    return anchors * softplus_unit(raw_output(z, phi))
