"""Shared helpers for the test suite."""

import numpy as np

from ddlink.channel import UserChannel


def random_channel(params, n_paths, rng, user_id=0):
    """Random integer-tap channel with distinct (l, k) pairs and unit mean power."""
    pairs = set()
    while len(pairs) < n_paths:
        pairs.add((int(rng.integers(params.M)), int(rng.integers(params.N))))
    gains = (rng.standard_normal(n_paths) + 1j * rng.standard_normal(n_paths)) / np.sqrt(
        2 * n_paths
    )
    ls, ks = zip(*sorted(pairs))
    return UserChannel.from_taps(gains, ls, ks, params, user_id)
