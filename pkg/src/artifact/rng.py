"""Counter-style random streams.

Every draw is addressed by (master_seed, stream, path block, step chunk) and
produced by a Philox generator keyed from that tuple, so path ``i`` at step
``k`` sees the same numbers whatever the ensemble size, horizon, starting step
or number of workers.
"""
import numpy as np

BLOCK = 64   # paths per keyed block
CHUNK = 64   # steps per keyed chunk

# stream tags
W1 = 1       # state noise
W2 = 2       # randomized control channel noise
DESIGN = 3   # initial-design uniforms
AUX = 4      # anything else (test-function draws, eta samples)


def _gen(seed, stream, block, chunk):
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1),
                                spawn_key=(int(stream), int(block), int(chunk)))
    return np.random.Generator(np.random.Philox(ss))


def normals(seed, stream, path_lo, path_hi, step_lo, step_hi, dim):
    """Standard normals of shape (step_hi-step_lo, path_hi-path_lo, dim)."""
    n_p, n_s = path_hi - path_lo, step_hi - step_lo
    out = np.empty((n_s, n_p, dim))
    if n_p <= 0 or n_s <= 0 or dim <= 0:
        return out
    b0, b1 = path_lo // BLOCK, (path_hi - 1) // BLOCK
    c0, c1 = step_lo // CHUNK, (step_hi - 1) // CHUNK
    for b in range(b0, b1 + 1):
        pa, pb = max(path_lo, b * BLOCK), min(path_hi, (b + 1) * BLOCK)
        for c in range(c0, c1 + 1):
            sa, sb = max(step_lo, c * CHUNK), min(step_hi, (c + 1) * CHUNK)
            z = _gen(seed, stream, b, c).standard_normal((CHUNK, BLOCK, dim))
            out[sa - step_lo:sb - step_lo, pa - path_lo:pb - path_lo] = \
                z[sa - c * CHUNK:sb - c * CHUNK, pa - b * BLOCK:pb - b * BLOCK]
    return out


def uniforms(seed, stream, path_lo, path_hi, dim):
    """U(0,1) draws of shape (path_hi-path_lo, dim), one row per path."""
    n_p = path_hi - path_lo
    out = np.empty((n_p, dim))
    if n_p <= 0 or dim <= 0:
        return out
    for b in range(path_lo // BLOCK, (path_hi - 1) // BLOCK + 1):
        pa, pb = max(path_lo, b * BLOCK), min(path_hi, (b + 1) * BLOCK)
        u = _gen(seed, stream, b, 2**31).random((BLOCK, dim))
        out[pa - path_lo:pb - path_lo] = u[pa - b * BLOCK:pb - b * BLOCK]
    return out


def block_ranges(n_paths, n_jobs):
    """Split [0, n_paths) into at most n_jobs block-aligned ranges."""
    n_blocks = -(-n_paths // BLOCK)
    n_jobs = max(1, min(n_jobs, n_blocks))
    edges = np.linspace(0, n_blocks, n_jobs + 1).round().astype(int) * BLOCK
    edges[-1] = n_paths
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]
