import hashlib

import numpy as np


def derive_seed(master, label):
    """Deterministic 64-bit sub-seed from a master seed and a text label."""
    digest = hashlib.sha256(f"{int(master)}::{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(master, label):
    return np.random.default_rng(derive_seed(master, label))
