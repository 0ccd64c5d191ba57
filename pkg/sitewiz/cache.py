"""
Utility module used for caching results of pure numerical functions.
"""
from typing import Any, Callable
from functools import wraps
from threading import Lock

import pickle

import numpy as np

from .doc import doc_category


__all__ = (
    "cache_result",
)


def _make_key(value: Any) -> Any:
    # numpy arrays are not hashable, key them by dtype, shape and raw bytes
    if isinstance(value, np.ndarray):
        return ("ndarray", value.dtype.str, value.shape, value.tobytes())

    if isinstance(value, (list, tuple)):
        return (type(value).__name__, tuple(_make_key(v) for v in value))

    if isinstance(value, dict):
        return ("dict", tuple(sorted((k, _make_key(v)) for k, v in value.items())))

    return value


@doc_category("Caching")
def cache_result(max: int = 256):
    """
    Caching decorator that also allows numpy arrays, dictionaries
    and lists to be used as arguments.

    Cached values are returned as-is, so the decorated function must
    return values that callers never modify in place (e.g., read-only arrays).

    Parameters
    --------------
    max: int
        The maximum number of items inside the cache.
        When exceeded, the older half of the cache is evicted.
    """
    def _decorator(fnc: Callable):
        cache_dict = {}
        lock = Lock()

        @wraps(fnc)
        def wrapper(*args, **kwargs):
            try:
                key = pickle.dumps((_make_key(args), _make_key(kwargs)))
            except Exception:
                return fnc(*args, **kwargs)

            with lock:
                result = cache_dict.get(key, Ellipsis)

            if result is not Ellipsis:
                return result

            result = fnc(*args, **kwargs)
            with lock:
                cache_dict[key] = result
                if len(cache_dict) > max:
                    items = list(cache_dict.items())[len(cache_dict) - max // 2:]
                    cache_dict.clear()
                    cache_dict.update(items)

            return result

        wrapper.cache_clear = cache_dict.clear
        return wrapper

    return _decorator
