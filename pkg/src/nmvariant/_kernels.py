"""Compiled inner loop of the adversary simulation.

Mirrors :func:`nmvariant.simulation._trial_python` draw for draw; the two
must consume the generator identically so their results agree exactly.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def adversary_trial(rng, n, m, b_num, b_den):
    counts = np.zeros(n, np.int64)
    undrawn = np.empty(n, np.int64)
    hot = np.empty(n, np.int64)
    total = n * m
    carry = 0
    requests = 0
    while True:
        requests += 1
        target = -1
        for i in range(n):
            # member drawn from pool i is compromised iff floor(u*m) < counts[i]
            if rng.random() * m >= counts[i]:
                if target < 0 or counts[i] < counts[target]:
                    target = i
        if target < 0:
            return requests
        counts[target] += 1

        carry += b_num
        draws = carry // b_den
        carry -= draws * b_den
        if draws > total:
            draws = total
        for i in range(n):
            undrawn[i] = m
            hot[i] = counts[i]
        for t in range(draws):
            r = int(rng.random() * (total - t))
            for i in range(n):
                if r < undrawn[i]:
                    if r < hot[i]:
                        hot[i] -= 1
                        counts[i] -= 1
                    undrawn[i] -= 1
                    break
                r -= undrawn[i]
