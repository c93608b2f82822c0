"""Sparse mixture-of-experts layer: router, expert ensemble, top-k dispatch
and the weighted mixture, with per-token activation widths.

Dispatch selects the highest-probability experts per token (ties to the
lowest index) and mixes their outputs weighted by the raw softmax
probabilities; the selection itself carries no gradient, the weights do.
Tokens flagged for enhanced activation are dispatched to ``tail_experts``
experts instead of ``top_k``. In modality-grouped mode each token may only
select experts from its modality's group.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, add, gelu, matmul, mix, mul, normalize_rows, softmax_rows

__all__ = [
    "ConfigError",
    "ExpertGroupLayout",
    "MoEConfig",
    "Linear",
    "Expert",
    "ExpertEnsemble",
    "Router",
    "RouterOutput",
    "route_probabilities",
    "select_topk",
    "moe_forward",
    "per_token_activation_counts",
]

BALANCING_MODES = ("all", "language", "vision", "none")
SELECTOR_MODES = ("vtt", "vht", "none")


class ConfigError(ValueError):
    """Configuration violates a structural constraint."""


@dataclass(frozen=True)
class ExpertGroupLayout:
    """Partition of the expert index range into a vision and a language group,
    each with its own per-token selection width. Tail tokens activate every
    expert of the vision group."""

    vision_experts: tuple[int, ...]
    language_experts: tuple[int, ...]
    vision_k: int = 1
    language_k: int = 1

    def __post_init__(self):
        union = sorted(self.vision_experts + self.language_experts)
        n = len(union)
        if union != list(range(n)) or len(set(union)) != n:
            raise ConfigError(
                "vision and language expert groups must partition the expert range, "
                f"got {self.vision_experts} and {self.language_experts}"
            )
        if not 1 <= self.vision_k <= len(self.vision_experts):
            raise ConfigError(f"vision_k={self.vision_k} exceeds its group")
        if not 1 <= self.language_k <= len(self.language_experts):
            raise ConfigError(f"language_k={self.language_k} exceeds its group")

    @property
    def n_experts(self) -> int:
        return len(self.vision_experts) + len(self.language_experts)

    @property
    def vision_tail(self) -> int:
        return len(self.vision_experts)


@dataclass(frozen=True)
class MoEConfig:
    """Layer-level routing configuration.

    ``balancing`` picks which tokens the auxiliary balancing loss sees;
    ``selector`` picks which vision tokens get ``tail_experts`` activations
    (``none`` disables enhanced activation entirely).
    """

    n_experts: int = 4
    top_k: int = 2
    tail_experts: int = 4
    alpha: float = 0.01
    balancing: str = "all"
    selector: str = "none"
    group_layout: ExpertGroupLayout | None = None
    renormalize_topk: bool = False
    # Keep the expert-count factor in the language-only balancing loss so
    # alpha has identical scale across balancing modes; False reproduces the
    # unscaled variant.
    scaled_language_balancing: bool = True

    def __post_init__(self):
        if self.n_experts < 2:
            raise ConfigError(f"need at least 2 experts, got {self.n_experts}")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(
                f"top_k={self.top_k} must lie in [1, {self.n_experts}]"
            )
        if self.tail_experts > self.n_experts:
            raise ConfigError(
                f"tail_experts={self.tail_experts} exceeds expert count {self.n_experts}"
            )
        if self.tail_experts < self.top_k:
            raise ConfigError(
                f"tail_experts={self.tail_experts} must be >= top_k={self.top_k}"
            )
        if self.balancing not in BALANCING_MODES:
            raise ConfigError(f"unknown balancing mode {self.balancing!r}")
        if self.selector not in SELECTOR_MODES:
            raise ConfigError(f"unknown selector mode {self.selector!r}")
        if self.group_layout is not None and self.group_layout.n_experts != self.n_experts:
            raise ConfigError(
                f"group layout covers {self.group_layout.n_experts} experts, "
                f"config has {self.n_experts}"
            )


class Linear:
    """Affine map ``x @ weight + bias``."""

    def __init__(self, weight: Tensor, bias: Tensor):
        self.weight = weight
        self.bias = bias

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator, scale: float | None = None) -> "Linear":
        scale = (1.0 / np.sqrt(d_in)) if scale is None else scale
        w = Tensor(rng.normal(0.0, scale, size=(d_in, d_out)), requires_grad=True)
        b = Tensor(np.zeros(d_out), requires_grad=True)
        return cls(w, b)

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.weight), self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class Expert:
    """Two-layer feed-forward network d -> hidden -> d with a gelu gate."""

    def __init__(self, inner: Linear, outer: Linear):
        self.inner = inner
        self.outer = outer

    @classmethod
    def init(cls, d: int, hidden: int, rng: np.random.Generator) -> "Expert":
        return cls(Linear.init(d, hidden, rng), Linear.init(hidden, d, rng))

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(gelu(self.inner(x)))

    def parameters(self) -> list[Tensor]:
        return self.inner.parameters() + self.outer.parameters()


class ExpertEnsemble:
    """K same-shape experts plus an optional shared classifier head applied
    after the mixture."""

    def __init__(self, experts: Sequence[Expert], head: Linear | None = None):
        if len(experts) < 2:
            raise ConfigError(f"an ensemble needs at least 2 experts, got {len(experts)}")
        d_in = experts[0].inner.weight.shape[0]
        hidden = experts[0].inner.weight.shape[1]
        for e in experts:
            if e.inner.weight.shape != (d_in, hidden):
                raise ConfigError("experts must share identical shapes")
        self.experts = list(experts)
        self.head = head

    @classmethod
    def init(
        cls,
        d: int,
        hidden: int,
        n_experts: int,
        rng: np.random.Generator,
        n_classes: int | None = None,
    ) -> "ExpertEnsemble":
        experts = [Expert.init(d, hidden, rng) for _ in range(n_experts)]
        head = Linear.init(d, n_classes, rng) if n_classes else None
        return cls(experts, head)

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def parameters(self) -> list[Tensor]:
        params = [p for e in self.experts for p in e.parameters()]
        if self.head is not None:
            params += self.head.parameters()
        return params


class Router:
    """Linear router: token features -> one logit per expert."""

    def __init__(self, weight: Tensor):
        self.weight = weight

    @classmethod
    def init(cls, d: int, n_experts: int, rng: np.random.Generator, scale: float = 0.02) -> "Router":
        return cls(Tensor(rng.normal(0.0, scale, size=(d, n_experts)), requires_grad=True))

    @property
    def n_experts(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.weight]


@dataclass
class RouterOutput:
    """Per-token routing record for one layer on one batch.

    ``selected`` is -1-padded; ``weights`` holds the raw softmax probability
    of each selected expert (even when the mixture itself renormalizes).
    ``tail_flags`` are the dispatch flags the selector produced (all False
    when enhanced activation is off).
    """

    probs: Tensor
    rpv: np.ndarray
    tail_flags: np.ndarray
    selected: np.ndarray
    weights: np.ndarray
    counts: np.ndarray

    @property
    def selection(self) -> list[list[tuple[int, float]]]:
        rows = []
        for i in range(self.selected.shape[0]):
            c = int(self.counts[i])
            rows.append(
                [(int(self.selected[i, j]), float(self.weights[i, j])) for j in range(c)]
            )
        return rows


def route_probabilities(tokens: Tensor, router: Router) -> Tensor:
    """Softmax routing probabilities, one row per token."""
    return softmax_rows(matmul(tokens, router.weight))


def select_topk(prob_row, count: int, allowed=None) -> list[int]:
    """Indices of the ``count`` largest probabilities within ``allowed``,
    ordered by descending probability with ties broken toward the lowest
    index."""
    row = np.asarray(prob_row, dtype=np.float64)
    candidates = range(row.shape[0]) if allowed is None else sorted(allowed)
    candidates = list(candidates)
    if count > len(candidates):
        raise ValueError(
            f"cannot select {count} experts from {len(candidates)} allowed"
        )
    ordered = sorted(candidates, key=lambda j: (-row[j], j))
    return ordered[:count]


def _topk_batch(
    probs: np.ndarray, counts: np.ndarray, allowed: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized per-row top-count selection.

    Returns (selected, mask): ``selected`` is (m, max(counts)) of expert
    indices in tie-broken descending-probability order, padded with -1;
    ``mask`` is the (m, K) dispatch mask. A stable argsort on the negated
    probabilities realizes the lowest-index tie rule.
    """
    m, k = probs.shape
    if m == 0:
        return np.empty((0, 0), dtype=np.int64), np.zeros((0, k), dtype=bool)
    if np.any(counts > allowed.sum(axis=1)):
        raise ValueError("selection count exceeds the allowed expert set")
    key = np.where(allowed, -probs, np.inf)
    order = np.argsort(key, axis=1, kind="stable")
    take = np.arange(k)[None, :] < counts[:, None]
    mask = np.zeros((m, k), dtype=bool)
    np.put_along_axis(mask, order, take, axis=1)
    width = int(counts.max())
    selected = np.where(take[:, :width], order[:, :width], -1).astype(np.int64)
    return selected, mask


def _dispatch_plan(
    config: MoEConfig, modality_mask: np.ndarray, tail_flags: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-token selection widths and allowed-expert mask.

    ``modality_mask`` marks language tokens True.
    """
    m = modality_mask.shape[0]
    k_total = config.n_experts
    layout = config.group_layout
    if layout is None:
        counts = np.where(tail_flags, config.tail_experts, config.top_k).astype(np.int64)
        allowed = np.ones((m, k_total), dtype=bool)
        return counts, allowed
    counts = np.empty(m, dtype=np.int64)
    counts[modality_mask] = layout.language_k
    vision = ~modality_mask
    counts[vision] = np.where(
        tail_flags[vision], layout.vision_tail, layout.vision_k
    )
    allowed = np.zeros((m, k_total), dtype=bool)
    allowed[np.ix_(vision, np.asarray(layout.vision_experts))] = True
    allowed[np.ix_(modality_mask, np.asarray(layout.language_experts))] = True
    return counts, allowed


def moe_forward(
    tokens: Tensor,
    router: Router,
    ensemble: ExpertEnsemble,
    config: MoEConfig,
    modality_mask,
    tail_flags,
    probs: Tensor | None = None,
) -> tuple[Tensor, RouterOutput]:
    """One mixture-of-experts pass over a batch.

    ``modality_mask`` marks language tokens True; ``tail_flags`` may only
    flag vision tokens. Pass ``probs`` to reuse routing probabilities already
    computed for tail classification; otherwise they are computed here. The
    dispatch decision is a constant: gradients flow through the mixture
    weights and the selected experts only.
    """
    if ensemble.n_experts != config.n_experts:
        raise ConfigError(
            f"ensemble has {ensemble.n_experts} experts, config expects {config.n_experts}"
        )
    modality_mask = np.asarray(modality_mask, dtype=bool)
    tail_flags = np.asarray(tail_flags, dtype=bool)
    if np.any(tail_flags & modality_mask):
        raise ValueError("tail flags must only mark vision tokens")
    if probs is None:
        probs = route_probabilities(tokens, router)

    counts, allowed = _dispatch_plan(config, modality_mask, tail_flags)
    selected, dispatch_mask = _topk_batch(probs.data, counts, allowed)

    mix_weights = mul(probs, dispatch_mask.astype(np.float64))
    if config.renormalize_topk:
        mix_weights = normalize_rows(mix_weights)
    outputs = mix(mix_weights, [expert(tokens) for expert in ensemble.experts])

    width = selected.shape[1] if selected.size else 0
    if width:
        gathered = np.take_along_axis(probs.data, np.maximum(selected, 0), axis=1)
        weights = np.where(selected >= 0, gathered, 0.0)
    else:
        weights = np.zeros_like(selected, dtype=np.float64)

    router_output = RouterOutput(
        probs=probs,
        rpv=probs.data.var(axis=1),
        tail_flags=tail_flags,
        selected=selected,
        weights=weights,
        counts=counts,
    )
    return outputs, router_output


def per_token_activation_counts(router_output: RouterOutput) -> np.ndarray:
    """Number of experts activated per token (selection lengths)."""
    return router_output.counts.copy()
