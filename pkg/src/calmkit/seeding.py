"""Deterministic seed derivation for every randomized stage.

Each stage draws from ``np.random.SeedSequence((root_seed, stage_code, *index))``
so stages never share streams and any stage can be reproduced in isolation.
Sweep repetitions use root seeds ``seed + 0, seed + 1, ...``; the stage codes
below are the documented counter scheme.
"""
from __future__ import annotations

import numpy as np

STAGE_DATA = 1
STAGE_INIT = 2
STAGE_PRETRAIN = 3
STAGE_FINETUNE = 4
STAGE_PARTITION = 5
STAGE_MASK_INIT = 6
STAGE_MASK_BATCHES = 7


def rng_for(root_seed: int, stage: int, *index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((int(root_seed), int(stage), *map(int, index))))
