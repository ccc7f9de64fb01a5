"""Seed splitting: every random stream is derived from one root seed."""

import hashlib

import numpy as np


def derive_seed(root, *labels):
    """Return a 64-bit seed from ``hash(root, *labels)``.

    >>> derive_seed(0, "traj", 3) == derive_seed(0, "traj", 3)
    True
    """
    text = "/".join([str(int(root))] + [str(x) for x in labels])
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(root, *labels):
    return np.random.default_rng(derive_seed(root, *labels))
