"""Load-balancing losses and vision tail-token classification.

The auxiliary loss is K * sum_i(F_i * G_i): F_i is the fraction of dispatch
assignments expert i received (a constant, no gradient) and G_i the mean
routing probability of expert i (differentiable). The modality-aware variant
restricts both F and G to language tokens, so vision routing is free to
sharpen; its gradient w.r.t. vision router logits is exactly zero.

Tail classification happens per batch: a vision token is a tail token when
the variance of its routing probabilities (RPV) is strictly above the mean
RPV of the batch's vision tokens. The head selector flags the complement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, mul
from .moe import ConfigError, MoEConfig

__all__ = [
    "BalancingTerms",
    "TailSelectorConfig",
    "balancing_terms",
    "load_balancing_loss",
    "modality_balancing_loss",
    "classify_vision_tokens",
    "total_auxiliary_loss",
    "routing_probability_variance",
]


@dataclass
class BalancingTerms:
    """Per-expert dispatch fractions F, mean probabilities G, and the scalar
    loss (differentiable through G only)."""

    fractions: np.ndarray
    mean_probs: np.ndarray
    loss: Tensor


@dataclass(frozen=True)
class TailSelectorConfig:
    """Which vision tokens get enhanced expert activation.

    ``vtt`` flags tokens with RPV strictly above the batch mean, ``vht`` the
    complement among vision tokens, ``none`` disables flagging. The only
    supported threshold rule is the strict batch-mean comparison.
    """

    mode: str = "vtt"
    threshold_rule: str = "mean-strict"

    def __post_init__(self):
        if self.mode not in ("vtt", "vht", "none"):
            raise ConfigError(f"unknown tail selector mode {self.mode!r}")
        if self.threshold_rule != "mean-strict":
            raise ConfigError(f"unknown threshold rule {self.threshold_rule!r}")


def routing_probability_variance(probs) -> np.ndarray:
    """Population variance of each token's routing probabilities."""
    data = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return data.var(axis=1)


def _assignment_counts(selections, n_experts: int, row_mask: np.ndarray | None) -> np.ndarray:
    """Dispatch assignments per expert, optionally restricted to masked rows.

    ``selections`` is either a -1-padded (m, width) index array or a
    per-token list of expert indices / (index, weight) pairs.
    """
    counts = np.zeros(n_experts, dtype=np.int64)
    if isinstance(selections, np.ndarray):
        sel = selections if row_mask is None else selections[row_mask]
        if sel.size:
            flat = sel.ravel()
            flat = flat[flat >= 0]
            counts += np.bincount(flat, minlength=n_experts)
        return counts
    for i, row in enumerate(selections):
        if row_mask is not None and not row_mask[i]:
            continue
        for entry in row:
            idx = entry[0] if isinstance(entry, (tuple, list)) else entry
            counts[int(idx)] += 1
    return counts


def balancing_terms(
    probs: Tensor,
    selections,
    row_mask: np.ndarray | None = None,
    expert_factor: float | None = None,
) -> BalancingTerms:
    """F, G and the balancing loss over the (optionally masked) batch.

    F counts every (token, slot) dispatch assignment and is detached from the
    graph; G is differentiable. ``expert_factor`` overrides the leading K
    multiplier. An empty restriction yields an exact zero constant.
    """
    m, n_experts = probs.data.shape
    n_rows = int(row_mask.sum()) if row_mask is not None else m
    counts = _assignment_counts(selections, n_experts, row_mask)
    total = int(counts.sum())
    if n_rows == 0 or total == 0:
        zero = np.zeros(n_experts)
        return BalancingTerms(zero, zero, Tensor(np.asarray(0.0)))

    fractions = counts / total
    if row_mask is None:
        mean_probs = probs.data.mean(axis=0)
    else:
        mean_probs = probs.data[row_mask].mean(axis=0)
    factor = float(n_experts) if expert_factor is None else float(expert_factor)

    # K * sum_i F_i G_i == sum over masked rows of probs . F * (K / n_rows);
    # multiplying by a constant coefficient matrix keeps gradients exactly
    # zero on excluded rows.
    coeff = np.broadcast_to(fractions * (factor / n_rows), (m, n_experts))
    if row_mask is not None:
        coeff = coeff * row_mask[:, None]
    else:
        coeff = np.ascontiguousarray(coeff)
    loss = mul(probs, coeff).sum()
    return BalancingTerms(fractions, mean_probs, loss)


def load_balancing_loss(probs: Tensor, selections) -> Tensor:
    """Switch-style auxiliary loss over every token in the batch."""
    return balancing_terms(probs, selections).loss


def modality_balancing_loss(
    probs: Tensor,
    selections,
    modality_mask,
    scaled: bool = True,
) -> Tensor:
    """Balancing loss restricted to language tokens (``modality_mask`` True).

    ``scaled=False`` drops the leading expert-count factor (the unscaled
    variant); the default keeps it so the coefficient has the same scale as
    the all-token loss.
    """
    mask = np.asarray(modality_mask, dtype=bool)
    n_experts = probs.data.shape[1]
    factor = float(n_experts) if scaled else 1.0
    return balancing_terms(probs, selections, row_mask=mask, expert_factor=factor).loss


def classify_vision_tokens(probs, vision_mask, selector: TailSelectorConfig) -> np.ndarray:
    """Flag vision tokens for enhanced activation per the selector.

    RPV is computed per token; the threshold is the mean RPV over the current
    batch's vision tokens only. ``vtt`` flags strictly-above-mean tokens,
    ``vht`` the complement among vision tokens; language tokens are never
    flagged. No vision tokens -> all False.
    """
    vision = np.asarray(vision_mask, dtype=bool)
    flags = np.zeros(vision.shape[0], dtype=bool)
    if selector.mode == "none" or not vision.any():
        return flags
    rpv = routing_probability_variance(probs)
    mean_rpv = rpv[vision].mean()
    if selector.mode == "vtt":
        flags[vision] = rpv[vision] > mean_rpv
    else:
        flags[vision] = rpv[vision] <= mean_rpv
    return flags


def total_auxiliary_loss(
    task_loss: Tensor,
    probs,
    selections,
    modality_mask,
    config: MoEConfig,
) -> Tensor:
    """Task loss plus alpha times the configured balancing term, summed over
    layers.

    ``probs`` and ``selections`` may be single-layer values or per-layer
    sequences. Balancing modes: ``all`` covers every token, ``language`` and
    ``vision`` restrict to one modality, ``none`` returns the task loss
    untouched.
    """
    if config.balancing not in ("all", "language", "vision", "none"):
        raise ConfigError(f"unknown balancing mode {config.balancing!r}")
    if config.balancing == "none" or config.alpha == 0.0:
        return task_loss

    if isinstance(probs, Tensor):
        probs_layers = [probs]
        selections_layers = [selections]
    else:
        probs_layers = list(probs)
        selections_layers = list(selections)
        if len(selections_layers) != len(probs_layers):
            raise ConfigError(
                f"{len(probs_layers)} probability layers but "
                f"{len(selections_layers)} selection layers"
            )

    mask = np.asarray(modality_mask, dtype=bool)
    total = task_loss
    for layer_probs, layer_sel in zip(probs_layers, selections_layers):
        if config.balancing == "all":
            term = load_balancing_loss(layer_probs, layer_sel)
        elif config.balancing == "language":
            term = modality_balancing_loss(
                layer_probs, layer_sel, mask, scaled=config.scaled_language_balancing
            )
        else:  # vision
            term = modality_balancing_loss(
                layer_probs, layer_sel, ~mask, scaled=config.scaled_language_balancing
            )
        total = add(total, mul(term, config.alpha))
    return total
