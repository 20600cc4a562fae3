import numpy as np


def make_rng(seed, *keys):
    """Independent generator for the stream identified by ``(seed, *keys)``.

    Streams for distinct key tuples are statistically independent, so
    replicates can be evaluated in any order (or in parallel) without
    changing their draws.
    """
    entropy = [int(seed)] + [int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))
