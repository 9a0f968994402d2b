"""Corruption stream construction: TTA, continual, gradual, recurring, non-iid.

Per-segment sampling seeds depend only on (run seed, kind, severity,
occurrence), never on segment position, so per-corruption TTA results are
invariant to corruption ordering.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .corrupt import KINDS, corrupt

SCENARIOS = ("tta", "ctta", "gradual", "recurring", "dirichlet")
GRADUAL_SEVERITIES = (1, 2, 3, 4, 5, 4, 3, 2, 1)
DIRICHLET_ALPHA_GRID = (1.0, 0.5, 0.1, 0.05)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if not 1 <= self.severity <= 5:
            raise ValueError(f"severity must be in [1, 5], got {self.severity}")


@dataclass(frozen=True)
class StreamSegment:
    corruption: CorruptionSpec
    batches: int
    tag: str
    occurrence: int = 0  # visit count of this (kind, severity) within the stream


@dataclass(frozen=True)
class StreamSpec:
    scenario: str
    segments: tuple[StreamSegment, ...]
    batch_size: int = 64
    dirichlet_alpha: float | None = None

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.scenario == "dirichlet" and (self.dirichlet_alpha or 0.0) <= 0.0:
            raise ValueError("dirichlet scenario needs dirichlet_alpha > 0")

    def total_batches(self) -> int:
        return sum(seg.batches for seg in self.segments)


def _segments(kinds, severity, batches, seed, counters=None) -> list[StreamSegment]:
    counters = {} if counters is None else counters
    out = []
    for kind in kinds:
        key = (kind, severity)
        occurrence = counters.get(key, 0)
        counters[key] = occurrence + 1
        out.append(
            StreamSegment(CorruptionSpec(kind, severity, seed), batches, kind, occurrence)
        )
    return out


def tta_streams(
    kinds: Sequence[str] = KINDS,
    severity: int = 5,
    batches_per_domain: int = 20,
    batch_size: int = 64,
    seed: int = 0,
) -> list[StreamSpec]:
    """One single-segment stream per corruption, evaluated independently."""
    return [
        StreamSpec("tta", tuple(_segments([kind], severity, batches_per_domain, seed)), batch_size)
        for kind in kinds
    ]


def ctta_stream(
    kinds: Sequence[str] = KINDS,
    severity: int = 5,
    batches_per_domain: int = 20,
    batch_size: int = 64,
    seed: int = 0,
) -> StreamSpec:
    return StreamSpec(
        "ctta", tuple(_segments(kinds, severity, batches_per_domain, seed)), batch_size
    )


def gradual_stream(
    kinds: Sequence[str] = KINDS,
    batches_per_step: int = 5,
    batch_size: int = 64,
    seed: int = 0,
) -> StreamSpec:
    """Severity ramps 1-2-3-4-5-4-3-2-1 inside each corruption."""
    segments = []
    counters: dict = {}
    for kind in kinds:
        for severity in GRADUAL_SEVERITIES:
            key = (kind, severity)
            occurrence = counters.get(key, 0)
            counters[key] = occurrence + 1
            segments.append(
                StreamSegment(
                    CorruptionSpec(kind, severity, seed),
                    batches_per_step,
                    f"{kind}@s{severity}",
                    occurrence,
                )
            )
    return StreamSpec("gradual", tuple(segments), batch_size)


def recurring_stream(
    kinds: Sequence[str],
    rounds: int = 2,
    severity: int = 5,
    batches_per_domain: int = 20,
    batch_size: int = 64,
    seed: int = 0,
) -> StreamSpec:
    """The same domains revisited; each visit draws different samples."""
    segments: list[StreamSegment] = []
    counters: dict = {}
    for _ in range(rounds):
        segments.extend(_segments(kinds, severity, batches_per_domain, seed, counters))
    return StreamSpec("recurring", tuple(segments), batch_size)


def dirichlet_streams(
    alpha: float,
    kinds: Sequence[str] = KINDS,
    severity: int = 5,
    batches_per_domain: int = 20,
    batch_size: int = 64,
    seed: int = 0,
) -> list[StreamSpec]:
    if alpha <= 0.0:
        raise ValueError(f"dirichlet alpha must be positive, got {alpha}")
    return [
        StreamSpec(
            "dirichlet",
            tuple(_segments([kind], severity, batches_per_domain, seed)),
            batch_size,
            dirichlet_alpha=alpha,
        )
        for kind in kinds
    ]


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    tag: str
    spec: CorruptionSpec
    index: int


def _segment_rng(seed: int, segment: StreamSegment) -> np.random.Generator:
    kind_index = KINDS.index(segment.corruption.kind)
    return np.random.default_rng(
        np.random.SeedSequence(
            [int(seed), kind_index, segment.corruption.severity, segment.occurrence]
        )
    )


class _DirichletSampler:
    """Class-imbalanced batches: proportions ~ Dir(alpha), samples drawn
    without replacement per class while a class pool lasts."""

    def __init__(self, labels: np.ndarray, alpha: float, rng: np.random.Generator):
        self.rng = rng
        self.alpha = alpha
        self.classes = np.unique(labels)
        self.pools = {int(c): list(np.flatnonzero(labels == c)) for c in self.classes}
        self.cursors = {int(c): [] for c in self.classes}

    def _draw_from_class(self, c: int) -> int:
        if not self.cursors[c]:
            pool = np.array(self.pools[c])
            self.cursors[c] = list(self.rng.permutation(pool))
        return int(self.cursors[c].pop())

    def sample(self, batch_size: int) -> np.ndarray:
        proportions = self.rng.dirichlet(np.full(self.classes.shape[0], self.alpha))
        counts = self.rng.multinomial(batch_size, proportions)
        idx = [self._draw_from_class(int(c)) for c, k in zip(self.classes, counts) for _ in range(k)]
        return np.array(idx, dtype=np.intp)


def iter_batches(
    stream: StreamSpec,
    test_images: np.ndarray,
    test_labels: np.ndarray,
    seed: int = 0,
) -> Iterator[Batch]:
    n = test_images.shape[0]
    index = 0
    for segment in stream.segments:
        rng = _segment_rng(seed, segment)
        sampler = None
        if stream.scenario == "dirichlet":
            sampler = _DirichletSampler(test_labels, stream.dirichlet_alpha, rng)
        for _ in range(segment.batches):
            if sampler is not None:
                idx = sampler.sample(stream.batch_size)
            else:
                idx = rng.choice(n, size=stream.batch_size, replace=False)
            spec = segment.corruption
            images = corrupt(test_images[idx], spec.kind, spec.severity, spec.seed)
            yield Batch(images, test_labels[idx], segment.tag, spec, index)
            index += 1
