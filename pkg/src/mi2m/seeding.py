"""Deterministic fan-out of one global seed into per-component seeds."""
import numpy as np
import torch

# Fixed counters; never renumber, or old runs stop being reproducible.
COMPONENTS = {
    "synth": 1,
    "tokenizer.wifi": 2,
    "tokenizer.vision": 3,
    "encoder.init": 4,
    "encoder.mask": 5,
    "encoder.order": 6,
    "head.init": 7,
    "head.order": 8,
    "split": 9,
}


def derive_seed(global_seed: int, component: str) -> int:
    counter = COMPONENTS[component]
    state = np.random.SeedSequence([int(global_seed), counter]).generate_state(1, dtype=np.uint32)
    return int(state[0])


def torch_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g
