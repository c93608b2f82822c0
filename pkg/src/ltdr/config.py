"""Experiment configuration: JSON schema, validation, and arm semantics.

The JSON document is the source of truth for a run. Every key has a default;
unknown keys are rejected; the arm decides the balancing mode and the default
tail selector:

    baseline          balance all tokens, no enhanced activation
    DAR               balance language tokens only
    EEA               balance all tokens, enhance vision tail tokens
    LTDR              DAR + EEA
    minus-LLB         language balancing removed (vision-only balancing)
    minus-ALB         no balancing at all
    modality-grouped  experts partitioned per modality, per-group top-k

``selector`` may override the tail-token choice (``vht`` picks the head
complement) only on arms that enhance activation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from .data import ConceptWorld
from .moe import ConfigError, ExpertGroupLayout, MoEConfig

__all__ = ["ARMS", "WorldParams", "GroupParams", "ExperimentConfig", "parse_config"]

# arm -> (balancing mode, default selector, uses expert groups)
ARMS = {
    "baseline": ("all", "none", False),
    "DAR": ("language", "none", False),
    "EEA": ("all", "vtt", False),
    "LTDR": ("language", "vtt", False),
    "minus-LLB": ("vision", "none", False),
    "minus-ALB": ("none", "none", False),
    "modality-grouped": ("all", "none", True),
}


@dataclass(frozen=True)
class WorldParams:
    dim: int = 32
    vision_concepts: int = 16
    language_concepts: int = 16
    zipf_exponent: float = 1.2
    noise_sigma: float = 0.1
    background_concepts: tuple[int, ...] = (0,)
    vision_tokens: int = 256
    language_tokens: int = 64

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "vision_concepts": self.vision_concepts,
            "language_concepts": self.language_concepts,
            "zipf_exponent": self.zipf_exponent,
            "noise_sigma": self.noise_sigma,
            "background_concepts": list(self.background_concepts),
            "vision_tokens": self.vision_tokens,
            "language_tokens": self.language_tokens,
        }


@dataclass(frozen=True)
class GroupParams:
    vision_experts: tuple[int, ...]
    language_experts: tuple[int, ...]
    vision_k: int = 1
    language_k: int = 1

    def to_dict(self) -> dict:
        return {
            "vision_experts": list(self.vision_experts),
            "language_experts": list(self.language_experts),
            "vision_k": self.vision_k,
            "language_k": self.language_k,
        }

    def layout(self) -> ExpertGroupLayout:
        return ExpertGroupLayout(
            vision_experts=self.vision_experts,
            language_experts=self.language_experts,
            vision_k=self.vision_k,
            language_k=self.language_k,
        )


def _default_groups(n_experts: int) -> GroupParams:
    half = n_experts // 2
    return GroupParams(
        vision_experts=tuple(range(half)),
        language_experts=tuple(range(half, n_experts)),
    )


@dataclass(frozen=True)
class ExperimentConfig:
    arm: str = "LTDR"
    n_experts: int = 4
    top_k: int = 2
    tail_experts: int = 4
    alpha: float = 0.01
    layers: int = 2
    steps: int = 2000
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    train_batches: int = 50
    seed: int = 0
    selector: str = "vtt"
    renormalize_topk: bool = False
    scaled_language_balancing: bool = True
    expert_hidden: int | None = None
    eval_batches: int = 10
    load_skew_bound: float = 2.0
    world: WorldParams = field(default_factory=WorldParams)
    groups: GroupParams | None = None
    arms: tuple[str, ...] = ("baseline", "DAR", "EEA", "LTDR")
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    @property
    def balancing(self) -> str:
        return ARMS[self.arm][0]

    @property
    def hidden_width(self) -> int:
        return self.expert_hidden if self.expert_hidden is not None else 4 * self.world.dim

    def moe_config(self) -> MoEConfig:
        layout = self.groups.layout() if self.groups is not None else None
        return MoEConfig(
            n_experts=self.n_experts,
            top_k=self.top_k,
            tail_experts=self.tail_experts,
            alpha=self.alpha,
            balancing=self.balancing,
            selector=self.selector,
            group_layout=layout,
            renormalize_topk=self.renormalize_topk,
            scaled_language_balancing=self.scaled_language_balancing,
        )

    def build_world(self) -> ConceptWorld:
        w = self.world
        return ConceptWorld.build(
            c_vision=w.vision_concepts,
            c_language=w.language_concepts,
            dim=w.dim,
            noise_sigma=w.noise_sigma,
            zipf_exponent=w.zipf_exponent,
            background_concepts=w.background_concepts,
            seed=self.seed,
        )

    def with_arm(self, arm: str, seed: int | None = None) -> "ExperimentConfig":
        """Derive a cell configuration: the arm's canonical selector and group
        settings replace the current ones."""
        if arm not in ARMS:
            raise ConfigError(f"unknown arm {arm!r}")
        _, selector, grouped = ARMS[arm]
        groups = _default_groups(self.n_experts) if grouped else None
        cfg = replace(
            self,
            arm=arm,
            selector=selector,
            groups=groups,
            seed=self.seed if seed is None else seed,
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.arm not in ARMS:
            raise ConfigError(f"arm: unknown arm {self.arm!r}; choose from {sorted(ARMS)}")
        _, default_selector, grouped = ARMS[self.arm]
        enhances = default_selector != "none"
        if enhances and self.selector == "none":
            raise ConfigError(
                f"selector: arm {self.arm!r} enhances expert activation and needs a "
                "tail selector (vtt or vht)"
            )
        if not enhances and self.selector != "none":
            raise ConfigError(
                f"selector: arm {self.arm!r} has no enhanced activation, but "
                f"selector={self.selector!r} was set"
            )
        if grouped and self.groups is None:
            raise ConfigError("groups: arm 'modality-grouped' needs expert groups")
        if not grouped and self.groups is not None:
            raise ConfigError(
                f"groups: arm {self.arm!r} does not partition experts, but groups were set"
            )
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer: unknown optimizer {self.optimizer!r}")
        if self.layers < 1:
            raise ConfigError(f"layers: need at least 1, got {self.layers}")
        if self.steps < 0:
            raise ConfigError(f"steps: must be nonnegative, got {self.steps}")
        if self.train_batches < 1:
            raise ConfigError(f"train_batches: need at least 1, got {self.train_batches}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate: must be nonnegative, got {self.learning_rate}")
        if self.eval_batches < 1:
            raise ConfigError(f"eval_batches: need at least 1, got {self.eval_batches}")
        if self.load_skew_bound <= 1.0:
            raise ConfigError("load_skew_bound: must exceed 1.0")
        if self.alpha < 0:
            raise ConfigError(f"alpha: must be nonnegative, got {self.alpha}")
        for a in self.arms:
            if a not in ARMS:
                raise ConfigError(f"arms: unknown arm {a!r}")
        if not self.seeds:
            raise ConfigError("seeds: need at least one seed")
        if self.expert_hidden is not None and self.expert_hidden < 1:
            raise ConfigError(f"expert_hidden: must be positive, got {self.expert_hidden}")
        self.moe_config()  # surfaces K/k/a and group-layout violations

    def to_dict(self) -> dict:
        out = {
            "arm": self.arm,
            "K": self.n_experts,
            "k": self.top_k,
            "a": self.tail_experts,
            "alpha": self.alpha,
            "layers": self.layers,
            "steps": self.steps,
            "learning_rate": self.learning_rate,
            "optimizer": self.optimizer,
            "train_batches": self.train_batches,
            "seed": self.seed,
            "selector": self.selector,
            "renormalize_topk": self.renormalize_topk,
            "scaled_language_balancing": self.scaled_language_balancing,
            "expert_hidden": self.expert_hidden,
            "eval_batches": self.eval_batches,
            "load_skew_bound": self.load_skew_bound,
            "world": self.world.to_dict(),
            "groups": self.groups.to_dict() if self.groups is not None else None,
            "arms": list(self.arms),
            "seeds": list(self.seeds),
        }
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_INT = "int"
_FLOAT = "float"
_BOOL = "bool"
_STR = "str"


def _typed(field_name: str, value, kind: str):
    if kind == _INT:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{field_name}: expected an integer, got {value!r}")
        return value
    if kind == _FLOAT:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{field_name}: expected a number, got {value!r}")
        return float(value)
    if kind == _BOOL:
        if not isinstance(value, bool):
            raise ConfigError(f"{field_name}: expected a boolean, got {value!r}")
        return value
    if isinstance(value, str):
        return value
    raise ConfigError(f"{field_name}: expected a string, got {value!r}")


def _int_list(field_name: str, value) -> tuple[int, ...]:
    if not isinstance(value, list) or any(
        isinstance(v, bool) or not isinstance(v, int) for v in value
    ):
        raise ConfigError(f"{field_name}: expected a list of integers, got {value!r}")
    return tuple(value)


def _parse_world(raw: dict) -> WorldParams:
    if not isinstance(raw, dict):
        raise ConfigError(f"world: expected an object, got {raw!r}")
    defaults = WorldParams()
    known = {
        "dim": _INT,
        "vision_concepts": _INT,
        "language_concepts": _INT,
        "zipf_exponent": _FLOAT,
        "noise_sigma": _FLOAT,
        "vision_tokens": _INT,
        "language_tokens": _INT,
    }
    kwargs = {}
    for key, value in raw.items():
        if key == "background_concepts":
            kwargs[key] = _int_list("world.background_concepts", value)
        elif key in known:
            kwargs[key] = _typed(f"world.{key}", value, known[key])
        else:
            raise ConfigError(f"world.{key}: unknown key")
    world = replace(defaults, **kwargs)
    if world.dim < 1 or world.vision_concepts < 1 or world.language_concepts < 1:
        raise ConfigError("world: dim and concept counts must be positive")
    if world.vision_tokens < 0 or world.language_tokens < 0:
        raise ConfigError("world: token counts must be nonnegative")
    if world.noise_sigma < 0:
        raise ConfigError("world.noise_sigma: must be nonnegative")
    if world.zipf_exponent < 0:
        raise ConfigError("world.zipf_exponent: must be nonnegative")
    return world


def _parse_groups(raw: dict) -> GroupParams:
    if not isinstance(raw, dict):
        raise ConfigError(f"groups: expected an object, got {raw!r}")
    kwargs = {}
    for key, value in raw.items():
        if key in ("vision_experts", "language_experts"):
            kwargs[key] = _int_list(f"groups.{key}", value)
        elif key in ("vision_k", "language_k"):
            kwargs[key] = _typed(f"groups.{key}", value, _INT)
        else:
            raise ConfigError(f"groups.{key}: unknown key")
    if "vision_experts" not in kwargs or "language_experts" not in kwargs:
        raise ConfigError("groups: vision_experts and language_experts are required")
    return GroupParams(**kwargs)


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build a fully validated config; defaults fill absent keys, unknown keys
    are rejected with a field-level message."""
    if not isinstance(raw, dict):
        raise ConfigError(f"config: expected a JSON object, got {raw!r}")
    scalars = {
        "arm": ("arm", _STR),
        "K": ("n_experts", _INT),
        "k": ("top_k", _INT),
        "a": ("tail_experts", _INT),
        "alpha": ("alpha", _FLOAT),
        "layers": ("layers", _INT),
        "steps": ("steps", _INT),
        "learning_rate": ("learning_rate", _FLOAT),
        "optimizer": ("optimizer", _STR),
        "train_batches": ("train_batches", _INT),
        "seed": ("seed", _INT),
        "selector": ("selector", _STR),
        "renormalize_topk": ("renormalize_topk", _BOOL),
        "scaled_language_balancing": ("scaled_language_balancing", _BOOL),
        "eval_batches": ("eval_batches", _INT),
        "load_skew_bound": ("load_skew_bound", _FLOAT),
    }
    kwargs: dict = {}
    for key, value in raw.items():
        if key in scalars:
            attr, kind = scalars[key]
            kwargs[attr] = _typed(key, value, kind)
        elif key == "expert_hidden":
            kwargs[key] = None if value is None else _typed(key, value, _INT)
        elif key == "world":
            kwargs[key] = _parse_world(value)
        elif key == "groups":
            kwargs[key] = None if value is None else _parse_groups(value)
        elif key == "arms":
            if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
                raise ConfigError(f"arms: expected a list of arm names, got {value!r}")
            kwargs[key] = tuple(value)
        elif key == "seeds":
            kwargs[key] = _int_list("seeds", value)
        else:
            raise ConfigError(f"{key}: unknown key")

    arm = kwargs.get("arm", ExperimentConfig.arm)
    if arm not in ARMS:
        raise ConfigError(f"arm: unknown arm {arm!r}; choose from {sorted(ARMS)}")
    _, default_selector, grouped = ARMS[arm]
    kwargs.setdefault("selector", default_selector)
    if grouped and kwargs.get("groups") is None:
        kwargs["groups"] = _default_groups(kwargs.get("n_experts", ExperimentConfig.n_experts))

    config = ExperimentConfig(**kwargs)
    config.validate()
    return config


def parse_config(path) -> ExperimentConfig:
    """Load and validate a JSON config file."""
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(raw)
