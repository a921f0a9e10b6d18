"""Counter-based splittable random streams.

Every stream is a Philox generator keyed by a SeedSequence whose spawn key
names what the stream is for, so results never depend on how work is split
across threads.
"""
import numpy as np

# Stream tags keep independent uses of one master seed apart.
STREAM_INITIAL = 0
STREAM_STEPS = 1
STREAM_CONTROL = 2
STREAM_INTEGRAL = 3


def stream(master_seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def trajectory_generator(master_seed: int, index: int, attempt: int = 0) -> np.random.Generator:
    """Generator owned by a single trajectory (and retry attempt)."""
    return stream(master_seed, STREAM_INITIAL, index, attempt)


def chunk_generator(master_seed: int, chunk: int, attempt: int = 0) -> np.random.Generator:
    """Generator for step noise of a fixed-size chunk of trajectories."""
    return stream(master_seed, STREAM_STEPS, chunk, attempt)


def trajectory_uniforms(master_seed: int, indices, width: int, attempt: int = 0) -> np.ndarray:
    """(len(indices), width) uniforms, row i drawn from trajectory indices[i]'s own stream."""
    indices = np.asarray(indices, dtype=np.int64)
    out = np.empty((len(indices), width))
    for row, idx in enumerate(indices):
        out[row] = trajectory_generator(master_seed, int(idx), attempt).random(width)
    return out
