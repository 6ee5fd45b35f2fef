"""Reproducible random-number streams.

All randomness in the package flows through Philox counter-based generators
derived from a single master seed via ``numpy.random.SeedSequence`` spawning.
Stream layout:

    master seed
      -> trial stream i          (spawn key: trial index)
           -> "init"             initial-condition sampling
           -> "hidden"           ground-truth hidden-state sampling
           -> "human"            human action noise
           -> "disturbance"      additive process noise
           -> "tree"             offline scenario-tree samples

Philox is counter-based and platform-independent, so identical
(config, master seed) pairs reproduce trials bitwise on any machine.
"""

from __future__ import annotations

import numpy as np

# Fixed sub-stream order; changing it changes every derived stream.
TRIAL_STREAMS = ("init", "hidden", "human", "disturbance", "tree")


def master_sequence(seed: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed)


def generator(seq: np.random.SeedSequence) -> np.random.Generator:
    """Philox generator for one already-spawned sequence."""
    return np.random.Generator(np.random.Philox(key=seq.generate_state(2, dtype=np.uint64)))


def trial_streams(master_seed: int, trial_index: int) -> dict[str, np.random.Generator]:
    """Independent named generators for one trial.

    Trial ``i`` depends only on (master_seed, i), never on how many other
    trials ran, which is what makes benchmark trials seed-isolated.
    """
    root = master_sequence(master_seed)
    trial_seq = np.random.SeedSequence(
        entropy=root.entropy, spawn_key=(trial_index,)
    )
    children = trial_seq.spawn(len(TRIAL_STREAMS))
    return {name: generator(child) for name, child in zip(TRIAL_STREAMS, children)}


def single_stream(seed: int) -> np.random.Generator:
    """One standalone Philox generator (tests, ad-hoc sampling)."""
    return generator(master_sequence(seed))
