"""Synthetic continually-shifting classification streams.

The source domain is a mixture of Gaussian class clusters whose means sit
on a sphere (orthonormal directions, so separation is seed-independent).
Each target domain redraws fresh source samples and pushes them through a
parameterized corruption; severity 0 is always the identity. Labels ride
along for evaluation only and are never shown to the adaptation loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CORRUPTION_KINDS = ("additive_noise", "rotation", "scale", "mean_shift")


@dataclass
class DomainSpec:
    """One target domain's corruption.

    kind/param pairs: additive_noise(sigma), rotation(angle in radians),
    scale(factor), mean_shift(direction vector, applied at unit length
    times ``shift_magnitude``). ``severity`` multiplies the effect, so the
    effect magnitude is monotone in it.
    """

    kind: str
    param: float = 1.0
    shift_direction: np.ndarray | None = None
    severity: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"kind must be one of {CORRUPTION_KINDS}, got '{self.kind}'")
        if self.severity < 0:
            raise ValueError("severity must be non-negative")
        if self.kind == "mean_shift":
            if self.shift_direction is None:
                raise ValueError("mean_shift needs a shift_direction vector")
            self.shift_direction = np.asarray(self.shift_direction, dtype=np.float64).reshape(-1)

    def apply(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.severity == 0.0:
            return x.copy()
        if self.kind == "additive_noise":
            return x + rng.normal(0.0, self.severity * self.param, size=x.shape)
        if self.kind == "rotation":
            return x @ _plane_rotation(x.shape[1], self.severity * self.param).T
        if self.kind == "scale":
            # interpolate the factor toward 1 so severity 0 is the identity
            factor = 1.0 + self.severity * (self.param - 1.0)
            return x * factor
        shift = self.shift_direction * (self.severity * self.param)
        return x + shift


def _plane_rotation(dim: int, angle: float) -> np.ndarray:
    """Block-diagonal rotation by ``angle`` in every disjoint coordinate plane."""
    rot = np.eye(dim)
    c, s = np.cos(angle), np.sin(angle)
    for i in range(0, dim - 1, 2):
        rot[i, i] = c
        rot[i, i + 1] = -s
        rot[i + 1, i] = s
        rot[i + 1, i + 1] = c
    return rot


@dataclass
class DomainData:
    """An ordered list of (x, labels) batches for one target domain."""

    index: int
    spec: DomainSpec
    batches: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    @property
    def all_x(self) -> np.ndarray:
        return np.vstack([x for x, _ in self.batches])

    @property
    def all_labels(self) -> np.ndarray:
        return np.concatenate([y for _, y in self.batches])


@dataclass
class DomainStream:
    """Labeled source data plus the ordered sequence of target domains."""

    source_x: np.ndarray
    source_y: np.ndarray
    domains: list[DomainData]
    class_count: int
    dim: int
    batch_size: int
    seed: int


def class_means(class_count: int, dim: int, radius: float, rng: np.random.Generator) -> np.ndarray:
    """Orthonormal class directions scaled onto a sphere of ``radius``."""
    if dim < class_count:
        raise ValueError("dim must be >= class_count for orthonormal means")
    gauss = rng.normal(size=(dim, class_count))
    q, _ = np.linalg.qr(gauss)
    return q.T[:class_count] * radius


def sample_class_clusters(
    n: int,
    means: np.ndarray,
    spread: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw n points with uniform class labels and isotropic Gaussian spread."""
    class_count, dim = means.shape
    labels = rng.integers(0, class_count, size=n)
    x = means[labels] + rng.normal(0.0, spread, size=(n, dim))
    return x, labels


DEFAULT_ANGLE_STEP = 0.24
DEFAULT_SPIKE_SEVERITY = 1.5


def default_domain_specs(
    dim: int,
    n_domains: int,
    rng: np.random.Generator,
    severity: float = 1.0,
    means: np.ndarray | None = None,
) -> list[DomainSpec]:
    """A deterministic progressive-drift schedule.

    Rotation angles ramp up domain by domain, so consecutive domains stay
    close (the premise of continual adaptation) while the cumulative shift
    grows large enough to badly degrade a frozen source model. The middle
    domain gets a severity spike, giving every stream one markedly harsh,
    night-like domain for the shift-metric analyses.
    """
    del rng, means  # other kinds and layouts come in through explicit specs
    specs = [
        DomainSpec("rotation", param=DEFAULT_ANGLE_STEP * (i + 1), severity=severity, seed=i)
        for i in range(n_domains)
    ]
    if n_domains >= 3:
        mid = n_domains // 2
        specs[mid].severity = specs[mid].severity * DEFAULT_SPIKE_SEVERITY
    return specs


def generate_stream(
    class_count: int = 4,
    dim: int = 16,
    n_domains: int = 8,
    batches_per_domain: int = 50,
    batch_size: int = 32,
    source_size: int = 4096,
    radius: float = 3.0,
    spread: float = 1.0,
    severity: float = 1.0,
    seed: int = 0,
    specs: list[DomainSpec] | None = None,
    means: np.ndarray | None = None,
) -> DomainStream:
    """Build the full stream: labeled source set plus seeded target domains.

    Every domain redraws fresh samples from the source distribution and
    corrupts them, so targets differ from the source only through the
    corruption (plus sampling noise). Deterministic in ``seed``.
    """
    if class_count < 2:
        raise ValueError("class_count must be >= 2")
    if dim < 2:
        raise ValueError("dim must be >= 2")
    if batches_per_domain < 1 or batch_size < 1:
        raise ValueError("stream needs at least one batch of at least one sample")
    root = np.random.SeedSequence(seed)
    keys = root.spawn(3 + (n_domains if specs is None else len(specs)))
    mean_rng = np.random.Generator(np.random.PCG64(keys[0]))
    source_rng = np.random.Generator(np.random.PCG64(keys[1]))
    spec_rng = np.random.Generator(np.random.PCG64(keys[2]))
    if means is None:
        means = class_means(class_count, dim, radius, mean_rng)
    else:
        means = np.asarray(means, dtype=np.float64)
        if means.shape != (class_count, dim):
            raise ValueError(f"means must have shape ({class_count}, {dim})")
    if specs is None:
        specs = default_domain_specs(dim, n_domains, spec_rng, severity=severity, means=means)
    source_x, source_y = sample_class_clusters(source_size, means, spread, source_rng)
    domains = []
    for i, spec in enumerate(specs):
        rng = np.random.Generator(np.random.PCG64(keys[3 + i]))
        batches = []
        for _ in range(batches_per_domain):
            x, y = sample_class_clusters(batch_size, means, spread, rng)
            batches.append((spec.apply(x, rng), y))
        domains.append(DomainData(index=i, spec=spec, batches=batches))
    return DomainStream(
        source_x=source_x,
        source_y=source_y,
        domains=domains,
        class_count=class_count,
        dim=dim,
        batch_size=batch_size,
        seed=seed,
    )
