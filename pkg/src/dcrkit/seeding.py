"""Per-component random streams derived from one root seed."""

from __future__ import annotations

import numpy as np

# stable ids; never renumber, append only
COMPONENTS = {
    "parents": 1,
    "toy": 2,
}


def derive_rng(root: int, component: str, index: int = 0) -> np.random.Generator:
    """Independent generator for ``component`` (and item ``index``) under ``root``."""
    seq = np.random.SeedSequence(root, spawn_key=(COMPONENTS[component], index))
    return np.random.default_rng(seq)
