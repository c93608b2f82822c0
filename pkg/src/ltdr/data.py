"""Synthetic multimodal token batches.

Language concepts are drawn uniformly; vision concepts follow a Zipf
rank-frequency law so a dominant low-rank background head coexists with rare
high-rank foreground concepts. Every token is its concept's unit-norm mean
plus isotropic Gaussian noise, so the classification task is separable but
the vision label distribution is long-tailed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

__all__ = ["ConceptWorld", "TokenBatch", "zipf_pmf", "zipf_sample", "generate_batch"]

_SEPARATION_FACTOR = 4.0
_BUILD_ATTEMPTS = 16


def zipf_pmf(n_concepts: int, exponent: float) -> np.ndarray:
    """P(rank r) proportional to (r+1)^-exponent for r in [0, n_concepts)."""
    if n_concepts < 1:
        raise ValueError(f"need at least one concept, got {n_concepts}")
    if exponent < 0:
        raise ValueError(f"exponent must be >= 0, got {exponent}")
    weights = (np.arange(1, n_concepts + 1, dtype=np.float64)) ** (-exponent)
    return weights / weights.sum()


def zipf_sample(n_concepts: int, exponent: float, rng: np.random.Generator, size=None):
    """Draw Zipf-distributed rank(s) via inverse-CDF lookup."""
    cdf = np.cumsum(zipf_pmf(n_concepts, exponent))
    cdf[-1] = 1.0  # guard the top edge against cumulative rounding
    u = rng.random(size)
    idx = np.searchsorted(cdf, u, side="right")
    return int(idx) if size is None else idx.astype(np.int64)


@dataclass(frozen=True)
class ConceptWorld:
    """Fixed concept geometry: unit-norm means, one per concept, with vision
    concepts first. Means are drawn once from the seed and must stay pairwise
    separated by more than 4x the noise scale."""

    c_vision: int
    c_language: int
    dim: int
    concept_means: np.ndarray
    noise_sigma: float
    zipf_exponent: float
    background_concepts: frozenset[int]
    seed: int

    def __post_init__(self):
        n = self.c_vision + self.c_language
        if self.concept_means.shape != (n, self.dim):
            raise ValueError(
                f"means shape {self.concept_means.shape} != ({n}, {self.dim})"
            )
        if not self.background_concepts <= set(range(self.c_vision)):
            raise ValueError("background concepts must be vision concepts")
        min_dist = _min_pairwise_distance(self.concept_means)
        if min_dist <= _SEPARATION_FACTOR * self.noise_sigma:
            raise ValueError(
                f"concept means too close: min distance {min_dist:.4f} "
                f"<= {_SEPARATION_FACTOR} * sigma ({self.noise_sigma})"
            )

    @classmethod
    def build(
        cls,
        c_vision: int = 16,
        c_language: int = 16,
        dim: int = 32,
        noise_sigma: float = 0.1,
        zipf_exponent: float = 1.2,
        background_concepts=(0,),
        seed: int = 0,
    ) -> "ConceptWorld":
        """Draw sphere-uniform concept means from the seed, re-drawing (from a
        deterministic stream) until the separation requirement holds."""
        n = c_vision + c_language
        ss = np.random.SeedSequence(entropy=seed, spawn_key=(0xC0,))
        for attempt in range(_BUILD_ATTEMPTS):
            rng = np.random.default_rng(ss.spawn(1)[0])
            means = rng.standard_normal((n, dim))
            means /= np.linalg.norm(means, axis=1, keepdims=True)
            if _min_pairwise_distance(means) > _SEPARATION_FACTOR * noise_sigma:
                return cls(
                    c_vision=c_vision,
                    c_language=c_language,
                    dim=dim,
                    concept_means=means,
                    noise_sigma=noise_sigma,
                    zipf_exponent=zipf_exponent,
                    background_concepts=frozenset(background_concepts),
                    seed=seed,
                )
        raise ValueError(
            f"could not separate {n} concepts in {dim} dims beyond "
            f"{_SEPARATION_FACTOR} * sigma ({noise_sigma}); lower noise_sigma"
        )

    @property
    def n_concepts(self) -> int:
        return self.c_vision + self.c_language

    @property
    def vision_rank_order(self) -> np.ndarray:
        """Vision concepts ordered by Zipf rank: background heads first."""
        background = sorted(self.background_concepts)
        rest = [c for c in range(self.c_vision) if c not in self.background_concepts]
        return np.asarray(background + rest, dtype=np.int64)

    def head_concepts(self) -> frozenset[int]:
        return self.background_concepts

    def tail_concepts(self) -> frozenset[int]:
        return frozenset(range(self.c_vision)) - self.background_concepts


def _min_pairwise_distance(means: np.ndarray) -> float:
    diff = means[:, None, :] - means[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    np.fill_diagonal(dist, np.inf)
    return float(dist.min())


@dataclass
class TokenBatch:
    """One batch of tokens: vision tokens first, then language tokens.
    ``modality_mask`` marks language tokens True."""

    features: np.ndarray
    modality_mask: np.ndarray
    concept_labels: np.ndarray
    seed: int | None = None

    @property
    def n_tokens(self) -> int:
        return self.features.shape[0]

    @property
    def vision_mask(self) -> np.ndarray:
        return ~self.modality_mask

    def to_csv(self, path) -> None:
        """Export as token_id, modality, concept, f0..f{d-1}."""
        d = self.features.shape[1]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["token_id", "modality", "concept"] + [f"f{j}" for j in range(d)])
            for i in range(self.n_tokens):
                modality = "language" if self.modality_mask[i] else "vision"
                row = [i, modality, int(self.concept_labels[i])]
                row += [f"{v:.17g}" for v in self.features[i]]
                writer.writerow(row)


def generate_batch(world: ConceptWorld, n_vision: int, n_language: int, rng) -> TokenBatch:
    """Sample a batch: Zipf-ranked vision labels, uniform language labels,
    features = concept mean + isotropic noise. ``rng`` may be a Generator or
    an integer seed; an integer gives bitwise-reproducible batches."""
    if n_vision < 0 or n_language < 0:
        raise ValueError("token counts must be nonnegative")
    seed = None
    if not isinstance(rng, np.random.Generator):
        seed = int(rng)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(world.seed, seed)))

    ranks = zipf_sample(world.c_vision, world.zipf_exponent, rng, size=n_vision)
    vision_labels = world.vision_rank_order[ranks] if n_vision else np.empty(0, np.int64)
    language_labels = world.c_vision + rng.integers(
        0, world.c_language, size=n_language, dtype=np.int64
    )
    labels = np.concatenate([vision_labels, language_labels])

    m = n_vision + n_language
    features = world.concept_means[labels].copy()
    if world.noise_sigma > 0 and m:
        features += world.noise_sigma * rng.standard_normal((m, world.dim))

    modality_mask = np.zeros(m, dtype=bool)
    modality_mask[n_vision:] = True
    return TokenBatch(
        features=features,
        modality_mask=modality_mask,
        concept_labels=labels,
        seed=seed,
    )
