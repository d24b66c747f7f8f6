"""Process-wide seeding and deterministic-mode switches."""

import os
import random

import numpy as np
import torch


def enable_determinism(seed: int) -> None:
    """Seed every RNG the pipeline touches and pin torch to deterministic kernels.

    Identical seeds then reproduce training and inference bitwise on the same
    build and thread count; thread count is pinned here for that reason.
    """
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    n_threads = int(os.environ.get("DASCSEG_NUM_THREADS", "1"))
    torch.set_num_threads(n_threads)


def torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen
