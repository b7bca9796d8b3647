"""Shared domain types: parameter boxes, RNG stream trees, training examples.

Every stochastic routine in this package draws from an :class:`RngStream`, a
value object identified by ``(master_seed, path)``. Identical stream values
produce identical draws regardless of process, thread schedule, or call
order, which is what makes experiment output reproducible under parallelism.
Derive child streams with :meth:`RngStream.substream` instead of sharing a
stateful generator across tasks.
"""

from __future__ import annotations

import dataclasses
import hashlib
from typing import Iterator, Sequence, Union

import numpy as np

PathKey = Union[int, str]

__all__ = [
    "ParamSpace",
    "RngStream",
    "TrainExample",
    "TrainingSet",
    "as_generator",
    "sample_theta",
    "substream",
]


@dataclasses.dataclass(frozen=True)
class ParamSpace:
    """Box-constrained parameter space with named, ordered coordinates.

    Parameters
    ----------
    names : sequence of str
        Unique coordinate labels, in estimation order.
    lower, upper : array-like
        Per-coordinate bounds with ``lower[k] < upper[k]``.
    """

    names: tuple
    lower: np.ndarray
    upper: np.ndarray

    def __init__(self, names: Sequence[str], lower, upper):
        names = tuple(names)
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        if lower.shape != (len(names),) or upper.shape != (len(names),):
            raise ValueError("bounds must match the number of names")
        if not (np.isfinite(lower).all() and np.isfinite(upper).all()):
            raise ValueError("bounds must be finite")
        if not np.all(lower < upper):
            raise ValueError("need lower[k] < upper[k] for every coordinate")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        lower.setflags(write=False)
        upper.setflags(write=False)

    @property
    def dim(self) -> int:
        return len(self.names)

    def center(self) -> np.ndarray:
        return (self.lower + self.upper) / 2.0

    def contains(self, theta, atol: float = 0.0) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(
            np.all(theta >= self.lower - atol) and np.all(theta <= self.upper + atol)
        )

    def clip(self, theta) -> np.ndarray:
        return np.clip(np.asarray(theta, dtype=float), self.lower, self.upper)


def _encode_key(key: PathKey) -> int:
    """Map a path component to a stable non-negative integer."""
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("stream path integers must be non-negative")
        return int(key)
    if isinstance(key, str):
        digest = hashlib.sha256(key.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "big")
    raise TypeError(f"stream path keys must be int or str, got {type(key)!r}")


@dataclasses.dataclass(frozen=True)
class RngStream:
    """Deterministic random stream keyed by ``(master_seed, path)``.

    A stream is a pure value: :meth:`generator` always starts the same
    sequence. Distinct paths give statistically independent sequences, so a
    task tree can hand each unit of work its own substream and remain
    byte-reproducible under any scheduling.
    """

    seed: int
    path: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "path", tuple(self.path))
        if not (0 <= int(self.seed) < 2**64):
            raise ValueError("master seed must fit in 64 bits")
        for key in self.path:
            _encode_key(key)  # validate early

    def substream(self, *keys: PathKey) -> "RngStream":
        """Child stream at ``path + keys``."""
        return RngStream(self.seed, self.path + tuple(keys))

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        spawn = tuple(_encode_key(k) for k in self.path)
        seq = np.random.SeedSequence(entropy=int(self.seed), spawn_key=spawn)
        return np.random.Generator(np.random.PCG64(seq))

    def seed_path(self) -> str:
        """Printable ``seed:key/key/...`` form used in result tables."""
        return f"{self.seed}:" + "/".join(str(k) for k in self.path)


def substream(rng: RngStream, index: PathKey) -> RngStream:
    """Functional alias for :meth:`RngStream.substream`."""
    return rng.substream(index)


def as_generator(rng: Union[RngStream, np.random.Generator]) -> np.random.Generator:
    """Accept either a stream value or an already-live generator."""
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng)!r}")


def sample_theta(space: ParamSpace, rng: Union[RngStream, np.random.Generator]) -> np.ndarray:
    """Draw one parameter vector uniformly from the box."""
    gen = as_generator(rng)
    return gen.uniform(space.lower, space.upper)


@dataclasses.dataclass(frozen=True)
class TrainExample:
    """One (parameter, moments) pair; moments come from data simulated at theta."""

    theta: np.ndarray
    moments: np.ndarray


@dataclasses.dataclass(frozen=True)
class TrainingSet:
    """Stacked training examples.

    ``attempts`` records how many simulations were run to produce the set;
    it exceeds ``len(self)`` when degenerate datasets were rejected.
    """

    thetas: np.ndarray
    moments: np.ndarray
    attempts: int

    def __post_init__(self):
        thetas = np.asarray(self.thetas, dtype=float)
        moments = np.asarray(self.moments, dtype=float)
        if thetas.ndim != 2 or moments.ndim != 2 or len(thetas) != len(moments):
            raise ValueError("thetas and moments must be 2-d with equal row counts")
        object.__setattr__(self, "thetas", thetas)
        object.__setattr__(self, "moments", moments)

    def __len__(self) -> int:
        return len(self.thetas)

    def __getitem__(self, i: int) -> TrainExample:
        return TrainExample(theta=self.thetas[i], moments=self.moments[i])

    def __iter__(self) -> Iterator[TrainExample]:
        for i in range(len(self)):
            yield self[i]
