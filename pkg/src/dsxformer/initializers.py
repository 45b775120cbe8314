import numpy as np


def trunc_normal(rng, shape, std=0.02, bound=2.0):
    """Normal(0, std) samples redrawn until they fall within ``bound`` std devs."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > bound * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound * std
    return out


def glorot_uniform(rng, shape):
    fan_out, fan_in = shape[0], shape[1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
