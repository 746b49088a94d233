#  Authors: The odecheck contributors
#
#  License: 3-clause BSD, <LICENSE>
"""Small helpers shared by several modules."""
import os
from ast import literal_eval
from concurrent.futures import ThreadPoolExecutor

import numpy as np

ENV_THREADS = 'ODECHECK_THREADS'


class DomainError(ValueError):
    """
    Raised when a quantity is evaluated outside of the domain where it is defined (non-positive
    parameter under a positive prior, point outside of a distribution support, zero tolerance ...).
    """
    def __init__(self, what, value):
        self.what = what
        self.value = value

    def __str__(self):
        return "%s is outside of its domain: %r" % (self.what, self.value)


def chain_rng(seed,  # type: int
              stream  # type: int
              ):
    # type: (...) -> np.random.Generator
    """
    Returns the random generator of stream `stream` (a chain index) derived from master seed `seed`. Streams are
    independent and reproducible: the same `(seed, stream)` always yields the same sequence.
    """
    return np.random.default_rng([int(seed), int(stream)])


def get_threads_from_env():
    """
    Returns the number of threads declared in the `ODECHECK_THREADS` environment variable, or None.

    :return:
    """
    raw = os.environ.get(ENV_THREADS, None)
    if raw is None or raw.strip() == '':
        return None
    try:
        value = literal_eval(raw.strip())
    except (ValueError, SyntaxError):
        raise ValueError("Environment variable %s should contain an integer, found %r" % (ENV_THREADS, raw))
    if not isinstance(value, int) or value < 1:
        raise ValueError("Environment variable %s should contain a positive integer, found %r" % (ENV_THREADS, raw))
    return value


def parallel_map(fun, items, threads=1):
    """
    Maps `fun` over `items`, preserving order. With `threads > 1` the calls are spread over a thread pool.
    Used for independent per-chain and per-draw work.
    """
    items = list(items)
    if threads is None or threads <= 1 or len(items) <= 1:
        return [fun(i) for i in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fun, items))
