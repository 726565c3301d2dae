"""Disk cache for ground-truth trajectory batches.

Adaptive reference solves dominate wall-clock, and identical batches recur
across commands and reruns.  Batches are keyed by a hash of everything that
determines them: the field/testbed descriptor, solver tolerances, batch size, and the
exact seed identity.  Files are plain npz holding the joint batch arrays.
"""

from __future__ import annotations

import hashlib
import json
import os
from typing import Optional

import numpy as np

from .ode_solvers import Trajectory, solve_adaptive_batch

__all__ = ["GTCache", "batch_key"]


def batch_key(descriptor: dict, batch_size: int, seed, rtol: float, atol: float) -> str:
    """Stable content hash for one ground-truth batch."""
    seed_id = (
        [int(seed.entropy), list(seed.spawn_key)]
        if isinstance(seed, np.random.SeedSequence)
        else int(seed)
    )
    doc = {
        "descriptor": descriptor,
        "batch_size": int(batch_size),
        "seed": seed_id,
        "rtol": float(rtol),
        "atol": float(atol),
    }
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


class GTCache:
    """Directory-backed store of solved batches with hit/miss counters."""

    def __init__(self, cache_dir: Optional[str]):
        self.cache_dir = cache_dir
        self.hits = 0
        self.misses = 0
        if cache_dir:
            os.makedirs(cache_dir, exist_ok=True)

    def _path(self, key: str) -> str:
        return os.path.join(self.cache_dir, f"gt-{key}.npz")

    def get_or_solve(self, f, descriptor: dict, batch_size: int, seed, rtol: float, atol: float):
        """Return the batch for this key, solving and storing on first use."""
        if not self.cache_dir:
            self.misses += 1
            return self._solve(f, batch_size, seed, rtol, atol)
        key = batch_key(descriptor, batch_size, seed, rtol, atol)
        path = self._path(key)
        if os.path.exists(path):
            self.hits += 1
            return _load_batch(path)
        self.misses += 1
        paths = self._solve(f, batch_size, seed, rtol, atol)
        _store_batch(path, paths)
        return paths

    @staticmethod
    def _solve(f, batch_size, seed, rtol, atol):
        rng = np.random.default_rng(seed)
        x0 = rng.standard_normal((batch_size, f.dim))
        return solve_adaptive_batch(f, x0, rtol=rtol, atol=atol)

    def provider(self, f, descriptor: dict, rtol: float, atol: float):
        """Bind everything but (batch_size, seed); matches train's hook."""

        def get(batch_size, seed):
            return self.get_or_solve(f, descriptor, batch_size, seed, rtol, atol)

        return get

    def counters(self) -> dict:
        return {"hits": self.hits, "misses": self.misses}


def _store_batch(path: str, paths):
    times = paths[0].times
    states = np.stack([p.states for p in paths], axis=1)
    derivs = np.stack([p.derivs for p in paths], axis=1)
    tmp = path + ".tmp"
    np.savez(
        tmp,
        times=times,
        states=states,
        derivs=derivs,
        solver_tolerance=np.asarray(paths[0].solver_tolerance),
    )
    # savez appends .npz to paths without the suffix
    os.replace(tmp + ".npz" if not tmp.endswith(".npz") else tmp, path)


def _load_batch(path: str):
    with np.load(path) as data:
        times = data["times"]
        states = data["states"]
        derivs = data["derivs"]
        tol = float(data["solver_tolerance"])
    return [
        Trajectory(
            times=times,
            states=states[:, b, :],
            derivs=derivs[:, b, :],
            solver_tolerance=tol,
        )
        for b in range(states.shape[1])
    ]
