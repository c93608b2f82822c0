"""Training harness: the stacked-MoE toy model, optimizers, the per-step
update, seeded experiment runs, and the ablation grid.

The model is embedding-free: raw token features pass through N residual MoE
layers and a shared linear classifier. Tail classification happens per layer
on that layer's routing probabilities (probabilities are computed once per
layer and reused for dispatch). A run is a pure function of its config and
seed: worlds, parameters, batches and evaluation data all derive from
deterministic seed streams.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ._alloc import tune_runtime
from .autodiff import Tensor, cross_entropy
from .balancing import TailSelectorConfig, classify_vision_tokens, total_auxiliary_loss
from .config import ExperimentConfig, config_from_dict
from .data import ConceptWorld, TokenBatch, generate_batch
from .metrics import RouterRecord, RunStats, load_ratio
from .moe import ExpertEnsemble, Linear, MoEConfig, Router, RouterOutput, moe_forward, route_probabilities

__all__ = [
    "MoEModel",
    "SGD",
    "Adam",
    "TrainTrace",
    "NonFiniteLossError",
    "train_step",
    "run_experiment",
    "evaluate",
    "ablation_suite",
    "ABLATION_COLUMNS",
    "make_optimizer",
]

# evaluation batches draw from a seed range far above any training step index
EVAL_SEED_BASE = 1_000_000_007


class NonFiniteLossError(RuntimeError):
    """Raised when a step produces a non-finite loss; carries a snapshot."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


class SGD:
    def __init__(self, params: list[Tensor], lr: float):
        self.params = params
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            p.data -= self.lr * p.grad

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


class Adam:
    """Adaptive-moment estimation with bias correction."""

    def __init__(self, params: list[Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in params]
        self._v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = m / bias1
            denom = np.sqrt(v / bias2)
            denom += self.eps
            update = update / denom
            update *= self.lr
            p.data -= update

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def make_optimizer(name: str, params: list[Tensor], lr: float):
    if name == "adam":
        return Adam(params, lr)
    if name == "sgd":
        return SGD(params, lr)
    raise ValueError(f"unknown optimizer {name!r}")


class MoEModel:
    """N residual MoE layers followed by a shared linear classifier."""

    def __init__(self, layers: list[tuple[Router, ExpertEnsemble]], head: Linear, moe_config: MoEConfig):
        self.layers = layers
        self.head = head
        self.moe_config = moe_config

    @classmethod
    def build(cls, config: ExperimentConfig, rng: np.random.Generator) -> "MoEModel":
        d = config.world.dim
        hidden = config.hidden_width
        n_classes = config.world.vision_concepts + config.world.language_concepts
        layers = []
        for _ in range(config.layers):
            router = Router.init(d, config.n_experts, rng)
            ensemble = ExpertEnsemble.init(d, hidden, config.n_experts, rng)
            layers.append((router, ensemble))
        head = Linear.init(d, n_classes, rng)
        return cls(layers, head, config.moe_config())

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for router, ensemble in self.layers:
            params += router.parameters()
            params += ensemble.parameters()
        params += self.head.parameters()
        return params

    def forward(self, features: Tensor, modality_mask: np.ndarray) -> tuple[Tensor, list[Tensor], list[np.ndarray], list[RouterOutput]]:
        """Full pass: per-layer routing, tail classification, mixture and
        residual, then the classifier. Returns (logits, per-layer probability
        tensors, per-layer selections, per-layer router outputs)."""
        cfg = self.moe_config
        selector = TailSelectorConfig(cfg.selector) if cfg.selector != "none" else None
        vision_mask = ~modality_mask
        x = features
        probs_layers: list[Tensor] = []
        selections: list[np.ndarray] = []
        router_outputs: list[RouterOutput] = []
        for router, ensemble in self.layers:
            probs = route_probabilities(x, router)
            if selector is not None:
                flags = classify_vision_tokens(probs.data, vision_mask, selector)
            else:
                flags = np.zeros(modality_mask.shape[0], dtype=bool)
            mixed, ro = moe_forward(
                x, router, ensemble, cfg, modality_mask, flags, probs=probs
            )
            x = mixed
            probs_layers.append(probs)
            selections.append(ro.selected)
            router_outputs.append(ro)
        logits = self.head(x)
        return logits, probs_layers, selections, router_outputs


@dataclass
class TrainTrace:
    """Per-step loss and timing series plus the final metrics snapshot."""

    task_loss: list[float] = field(default_factory=list)
    balance_loss: list[float] = field(default_factory=list)
    step_time_ms: list[float] = field(default_factory=list)
    final_stats: RunStats | None = None

    @property
    def n_steps(self) -> int:
        return len(self.task_loss)

    def median_step_ms(self) -> float:
        return float(np.median(self.step_time_ms)) if self.step_time_ms else 0.0


def train_step(model: MoEModel, batch: TokenBatch, config: ExperimentConfig, optimizer) -> dict[str, float]:
    """One optimization step: forward, backward, parameter update, grad reset.

    Returns the step's loss components; the recorded balancing value is the
    contribution actually added to the task loss (alpha-scaled).
    """
    features = Tensor(batch.features)
    logits, probs_layers, selections, _ = model.forward(features, batch.modality_mask)
    task = cross_entropy(logits, batch.concept_labels)
    total = total_auxiliary_loss(
        task, probs_layers, selections, batch.modality_mask, model.moe_config
    )
    task_value = task.item()
    total_value = total.item()
    if not np.isfinite(total_value):
        raise NonFiniteLossError(
            f"non-finite loss {total_value} (task {task_value})",
            snapshot={
                "task_loss": task_value,
                "total_loss": total_value,
                "arm": config.arm,
                "seed": config.seed,
            },
        )
    total.backward()
    optimizer.step()
    optimizer.zero_grad()
    return {
        "task_loss": task_value,
        "balance_loss": total_value - task_value,
        "total_loss": total_value,
    }


def _batch_for_step(world: ConceptWorld, config: ExperimentConfig, seed: int) -> TokenBatch:
    return generate_batch(
        world, config.world.vision_tokens, config.world.language_tokens, rng=seed
    )


def evaluate(model: MoEModel, config: ExperimentConfig, world: ConceptWorld) -> tuple[list[RouterRecord], RunStats]:
    """Routing records and aggregate statistics on held-out batches."""
    head_concepts = tuple(sorted(world.head_concepts()))
    records: list[RouterRecord] = []
    for i in range(config.eval_batches):
        batch = _batch_for_step(world, config, EVAL_SEED_BASE + i)
        logits, _, _, router_outputs = model.forward(
            Tensor(batch.features), batch.modality_mask
        )
        predictions = np.argmax(logits.data, axis=1)
        for layer, ro in enumerate(router_outputs):
            records.append(
                RouterRecord(
                    batch_index=i,
                    layer=layer,
                    probs=ro.probs.data,
                    rpv=ro.rpv,
                    tail_flags=ro.tail_flags,
                    selected=ro.selected,
                    weights=ro.weights,
                    counts=ro.counts,
                    modality_mask=batch.modality_mask,
                    concept_labels=batch.concept_labels,
                    predictions=predictions,
                    head_concepts=head_concepts,
                )
            )
    return records, RunStats.from_records(records)


def run_experiment(config: ExperimentConfig) -> tuple[TrainTrace, RunStats, list[RouterRecord]]:
    """Train for ``config.steps`` steps and evaluate. Deterministic given the
    config (bitwise identical parameters, records and statistics)."""
    tune_runtime()
    config.validate()
    world = config.build_world()
    params_rng = np.random.default_rng(
        np.random.SeedSequence(entropy=config.seed, spawn_key=(1,))
    )
    model = MoEModel.build(config, params_rng)
    optimizer = make_optimizer(config.optimizer, model.parameters(), config.learning_rate)

    # finite training set cycled in epochs: once the set is memorized, the
    # task gradient dies out and the balancing pressure is what keeps
    # shaping the router, mirroring the regime where load balancing matters
    trace = TrainTrace()
    for step in range(config.steps):
        batch = _batch_for_step(world, config, step % config.train_batches)
        t0 = time.perf_counter()
        losses = train_step(model, batch, config, optimizer)
        elapsed_ms = (time.perf_counter() - t0) * 1000.0
        trace.task_loss.append(losses["task_loss"])
        trace.balance_loss.append(losses["balance_loss"])
        trace.step_time_ms.append(elapsed_ms)

    records, stats = evaluate(model, config, world)
    trace.final_stats = stats
    return trace, stats, records


ABLATION_COLUMNS = (
    "arm",
    "seed",
    "acc_overall",
    "acc_head",
    "acc_tail",
    "mean_rpv_vision",
    "tail_fraction",
    "step_time_ms",
    "status",
)


_CELL_FIELDS = (
    "acc_overall",
    "acc_head",
    "acc_tail",
    "mean_rpv_vision",
    "tail_fraction",
    "step_time_ms",
)


def _run_cell(cell) -> dict:
    """One (arm, seed) cell as a picklable row of scalars."""
    config_doc, arm, seed = cell
    row: dict = {"arm": arm, "seed": seed}
    try:
        cell_config = config_from_dict(config_doc).with_arm(arm, seed=seed)
        trace, stats, _ = run_experiment(cell_config)
        row.update(
            acc_overall=stats.accuracy_overall,
            acc_head=stats.accuracy_head,
            acc_tail=stats.accuracy_tail,
            mean_rpv_vision=stats.mean_rpv_vision,
            tail_fraction=stats.tail_fraction,
            step_time_ms=trace.median_step_ms(),
            status="ok",
            # extra scalars for downstream analysis (not part of the CSV schema)
            mean_rpv_language=stats.mean_rpv_language,
            mean_rpv_head=stats.mean_rpv_head,
            mean_rpv_tail=stats.mean_rpv_tail,
            language_load_ratio=stats.language_load_ratio(),
            vision_load_ratio=stats.vision_load_ratio(),
            language_load_ratio_pooled=load_ratio(stats.expert_load[:, 1].sum(axis=0)),
            vision_load_ratio_pooled=load_ratio(stats.expert_load[:, 0].sum(axis=0)),
            balance_loss_total=float(sum(trace.balance_loss)),
            final_task_loss=trace.task_loss[-1] if trace.task_loss else None,
        )
    except Exception as exc:  # cell failures must not kill the grid
        row.update({f: None for f in _CELL_FIELDS})
        row["status"] = f"failed: {exc}"
    return row


def ablation_suite(base_config: ExperimentConfig, arms=None, seeds=None, workers: int = 1) -> list[dict]:
    """Run every arm x seed cell with the arm's canonical flag settings.

    A failing cell is recorded in its row's status and the suite continues.
    Cells are independent seeded runs, so they may fan out to a process pool
    (``workers``) without affecting results; rows are keyed by (arm, seed)
    and returned in grid order.
    """
    arms = list(arms if arms is not None else base_config.arms)
    seeds = list(seeds if seeds is not None else base_config.seeds)
    doc = base_config.to_dict()
    # derived cells re-resolve selector and groups from the arm
    doc.pop("selector", None)
    doc.pop("groups", None)
    cells = [(doc, arm, seed) for arm in arms for seed in seeds]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_cell, cells))
    return [_run_cell(cell) for cell in cells]
