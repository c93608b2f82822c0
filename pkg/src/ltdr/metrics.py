"""Routing statistics: expert token loading, RPV histograms, head/tail RPV
means, tail fraction, specialization entropy, and accuracy splits.

Every statistic is a pure function of serialized router records, so a run's
stats can be recomputed exactly from its ``router_log.jsonl``. The head/tail
split used for the RPV statistics is always the strict batch-mean rule over
each record's vision tokens (independent of which dispatch selector the run
used), so the split is reported for every arm.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "RouterRecord",
    "RunStats",
    "expert_loading",
    "rpv_histogram",
    "tail_fraction",
    "specialization_score",
    "load_ratio",
    "write_router_log",
    "read_router_log",
    "write_stats_csvs",
    "STATS_FILES",
]

MODALITIES = ("vision", "language")
STATS_FILES = (
    "expert_load.csv",
    "rpv_histogram.csv",
    "rpv_summary.csv",
    "specialization.csv",
    "accuracy.csv",
)


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


@dataclass
class RouterRecord:
    """Self-contained routing record for one (batch, layer) slice."""

    batch_index: int
    layer: int
    probs: np.ndarray
    rpv: np.ndarray
    tail_flags: np.ndarray
    selected: np.ndarray
    weights: np.ndarray
    counts: np.ndarray
    modality_mask: np.ndarray
    concept_labels: np.ndarray
    predictions: np.ndarray
    head_concepts: tuple[int, ...]

    @property
    def vision_mask(self) -> np.ndarray:
        return ~self.modality_mask

    def statistical_tail(self) -> np.ndarray:
        """Strict batch-mean head/tail split over this record's vision tokens."""
        vision = self.vision_mask
        flags = np.zeros(vision.shape[0], dtype=bool)
        if vision.any():
            mean_rpv = self.rpv[vision].mean()
            flags[vision] = self.rpv[vision] > mean_rpv
        return flags

    def to_json(self) -> str:
        doc = {
            "batch_index": int(self.batch_index),
            "layer": int(self.layer),
            "probs": self.probs.tolist(),
            "rpv": self.rpv.tolist(),
            "tail_flags": self.tail_flags.astype(int).tolist(),
            "selected": self.selected.tolist(),
            "weights": self.weights.tolist(),
            "counts": self.counts.tolist(),
            "modality_mask": self.modality_mask.astype(int).tolist(),
            "concept_labels": self.concept_labels.tolist(),
            "predictions": self.predictions.tolist(),
            "head_concepts": list(self.head_concepts),
        }
        return json.dumps(doc, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "RouterRecord":
        doc = json.loads(line)
        return cls(
            batch_index=int(doc["batch_index"]),
            layer=int(doc["layer"]),
            probs=np.asarray(doc["probs"], dtype=np.float64),
            rpv=np.asarray(doc["rpv"], dtype=np.float64),
            tail_flags=np.asarray(doc["tail_flags"], dtype=bool),
            selected=np.asarray(doc["selected"], dtype=np.int64),
            weights=np.asarray(doc["weights"], dtype=np.float64),
            counts=np.asarray(doc["counts"], dtype=np.int64),
            modality_mask=np.asarray(doc["modality_mask"], dtype=bool),
            concept_labels=np.asarray(doc["concept_labels"], dtype=np.int64),
            predictions=np.asarray(doc["predictions"], dtype=np.int64),
            head_concepts=tuple(doc["head_concepts"]),
        )


def write_router_log(records, path) -> None:
    with open(path, "w") as fh:
        for record in records:
            fh.write(record.to_json())
            fh.write("\n")


def read_router_log(path) -> list[RouterRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(RouterRecord.from_json(line))
    return records


def expert_loading(records) -> np.ndarray:
    """Dispatch assignments per (layer, modality, expert).

    Modality axis: 0 = vision, 1 = language.
    """
    records = list(records)
    if not records:
        return np.zeros((0, 2, 0), dtype=np.int64)
    n_layers = max(r.layer for r in records) + 1
    n_experts = records[0].probs.shape[1]
    load = np.zeros((n_layers, 2, n_experts), dtype=np.int64)
    for r in records:
        for axis, mask in ((0, r.vision_mask), (1, r.modality_mask)):
            sel = r.selected[mask].ravel()
            sel = sel[sel >= 0]
            if sel.size:
                load[r.layer, axis] += np.bincount(sel, minlength=n_experts)
    return load


def max_rpv(n_experts: int) -> float:
    """Largest possible routing-probability variance (one-hot row)."""
    return (n_experts - 1) / n_experts**2


def rpv_histogram(values, n_experts: int, bin_width: float = 0.01) -> np.ndarray:
    """Right-open bins of ``bin_width`` over [0, max_rpv]; the top bin is
    closed at the theoretical maximum."""
    if bin_width <= 0:
        raise ValueError(f"bin_width must be positive, got {bin_width}")
    values = np.asarray(values, dtype=np.float64)
    if values.size and values.min() < 0:
        raise ValueError(f"negative routing-probability variance: {values.min()}")
    top = max_rpv(n_experts)
    n_bins = int(math.ceil(top / bin_width - 1e-12))
    if values.size and values.max() > top * (1 + 1e-9) + 1e-12:
        raise ValueError(
            f"variance {values.max()} exceeds the theoretical maximum {top}"
        )
    idx = np.minimum((values / bin_width).astype(np.int64), n_bins - 1)
    return np.bincount(idx, minlength=n_bins)


def tail_fraction(tail_flags, vision_mask) -> float:
    """Share of vision tokens flagged as tail; 0 when there are none."""
    flags = np.asarray(tail_flags, dtype=bool)
    vision = np.asarray(vision_mask, dtype=bool)
    n_vision = int(vision.sum())
    if n_vision == 0:
        return 0.0
    return float(flags[vision].sum() / n_vision)


def specialization_score(selections, concept_labels, n_experts: int, all_slots: bool = False) -> dict[int, float]:
    """Shannon entropy (bits) of each concept's expert-assignment distribution.

    By default only the top-1 expert counts; ``all_slots`` widens to every
    selected slot. Concepts with no tokens are absent. 0 bits means fully
    specialized; log2(K) fully scattered.
    """
    assignments: dict[int, np.ndarray] = {}
    labels = np.asarray(concept_labels, dtype=np.int64)
    for i, row in enumerate(selections):
        concept = int(labels[i])
        hist = assignments.setdefault(concept, np.zeros(n_experts, dtype=np.int64))
        if isinstance(row, np.ndarray):
            picked = row[row >= 0]
            picked = picked if all_slots else picked[:1]
        else:
            picked = [e[0] if isinstance(e, (tuple, list)) else e for e in row]
            picked = picked if all_slots else picked[:1]
        for idx in picked:
            hist[int(idx)] += 1
    scores = {}
    for concept, hist in sorted(assignments.items()):
        total = hist.sum()
        if total == 0:
            continue
        p = hist[hist > 0] / total
        scores[concept] = float(-(p * np.log2(p)).sum())
    return scores


def load_ratio(counts) -> float:
    """Max/min loading ratio of one expert-count vector; inf when an expert
    received nothing."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.size == 0 or counts.max() == 0:
        return 0.0
    lo = counts.min()
    return float("inf") if lo == 0 else float(counts.max() / lo)


@dataclass
class RunStats:
    """Aggregate routing statistics over a set of router records."""

    n_layers: int
    n_experts: int
    bin_width: float
    expert_load: np.ndarray  # (layers, modality, expert)
    rpv_hist: np.ndarray  # (layers, modality, bins)
    mean_rpv_vision: float
    mean_rpv_language: float
    mean_rpv_head: float
    mean_rpv_tail: float
    tail_fraction: float
    specialization: dict[int, float]
    specialization_tokens: dict[int, int]
    accuracy_overall: float
    accuracy_head: float
    accuracy_tail: float
    head_concepts: tuple[int, ...] = ()

    @classmethod
    def from_records(cls, records, bin_width: float = 0.01) -> "RunStats":
        records = list(records)
        if not records:
            raise ValueError("cannot compute statistics from zero records")
        n_layers = max(r.layer for r in records) + 1
        n_experts = records[0].probs.shape[1]
        n_bins = rpv_histogram([], n_experts, bin_width).shape[0]

        load = expert_loading(records)
        hist = np.zeros((n_layers, 2, n_bins), dtype=np.int64)
        rpv_sum = {"vision": 0.0, "language": 0.0, "head": 0.0, "tail": 0.0}
        rpv_n = {"vision": 0, "language": 0, "head": 0, "tail": 0}

        for r in records:
            for axis, mask in ((0, r.vision_mask), (1, r.modality_mask)):
                if mask.any():
                    hist[r.layer, axis] += rpv_histogram(r.rpv[mask], n_experts, bin_width)
            stat_tail = r.statistical_tail()
            vision = r.vision_mask
            head = vision & ~stat_tail
            for name, mask in (
                ("vision", vision),
                ("language", r.modality_mask),
                ("head", head),
                ("tail", stat_tail),
            ):
                rpv_sum[name] += float(r.rpv[mask].sum())
                rpv_n[name] += int(mask.sum())

        def mean_of(name: str, fallback: float = 0.0) -> float:
            return rpv_sum[name] / rpv_n[name] if rpv_n[name] else fallback

        mean_vision = mean_of("vision")
        mean_head = mean_of("head", mean_vision)
        # an all-equal batch has an empty tail; report the head mean so the
        # tail >= head ordering still holds
        mean_tail = mean_of("tail", mean_head)

        # accuracy: one record per batch carries the predictions; use the
        # lowest layer to avoid double counting
        first_layer = min(r.layer for r in records)
        head_concepts: tuple[int, ...] = ()
        correct = total = 0
        head_correct = head_total = tail_correct = tail_total = 0
        for r in records:
            if r.layer != first_layer:
                continue
            head_concepts = r.head_concepts
            ok = r.predictions == r.concept_labels
            correct += int(ok.sum())
            total += ok.size
            vision = r.vision_mask
            in_head = np.isin(r.concept_labels, np.asarray(r.head_concepts, dtype=np.int64))
            head_mask = vision & in_head
            tail_mask = vision & ~in_head
            head_correct += int(ok[head_mask].sum())
            head_total += int(head_mask.sum())
            tail_correct += int(ok[tail_mask].sum())
            tail_total += int(tail_mask.sum())

        last_layer = n_layers - 1
        final = [r for r in records if r.layer == last_layer]
        sel = [row for r in final for row in r.selected]
        labels = np.concatenate([r.concept_labels for r in final])
        spec = specialization_score(sel, labels, n_experts)
        spec_tokens = {
            int(c): int((labels == c).sum()) for c in sorted(set(labels.tolist()))
        }

        return cls(
            n_layers=n_layers,
            n_experts=n_experts,
            bin_width=bin_width,
            expert_load=load,
            rpv_hist=hist,
            mean_rpv_vision=mean_vision,
            mean_rpv_language=mean_of("language"),
            mean_rpv_head=mean_head,
            mean_rpv_tail=mean_tail,
            tail_fraction=(rpv_n["tail"] / rpv_n["vision"]) if rpv_n["vision"] else 0.0,
            specialization=spec,
            specialization_tokens=spec_tokens,
            accuracy_overall=correct / total if total else 0.0,
            accuracy_head=head_correct / head_total if head_total else 0.0,
            accuracy_tail=tail_correct / tail_total if tail_total else 0.0,
            head_concepts=head_concepts,
        )

    def language_load_ratio(self, layer: int | None = None) -> float:
        """Max/min language expert loading, worst layer by default."""
        if layer is not None:
            return load_ratio(self.expert_load[layer, 1])
        return max(load_ratio(self.expert_load[l, 1]) for l in range(self.n_layers))

    def vision_load_ratio(self, layer: int | None = None) -> float:
        if layer is not None:
            return load_ratio(self.expert_load[layer, 0])
        return max(load_ratio(self.expert_load[l, 0]) for l in range(self.n_layers))


def write_stats_csvs(stats: RunStats, out_dir) -> list[Path]:
    """Write one CSV per statistic; returns the files written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    path = out / "expert_load.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "modality", "expert", "count"])
        for layer in range(stats.n_layers):
            for axis, modality in enumerate(MODALITIES):
                for e in range(stats.n_experts):
                    w.writerow([layer, modality, e, int(stats.expert_load[layer, axis, e])])
    written.append(path)

    path = out / "rpv_histogram.csv"
    top = max_rpv(stats.n_experts)
    n_bins = stats.rpv_hist.shape[2]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "modality", "bin_low", "bin_high", "count"])
        for layer in range(stats.n_layers):
            for axis, modality in enumerate(MODALITIES):
                for b in range(n_bins):
                    low = b * stats.bin_width
                    high = min((b + 1) * stats.bin_width, top)
                    w.writerow(
                        [layer, modality, _fmt(low), _fmt(high), int(stats.rpv_hist[layer, axis, b])]
                    )
    written.append(path)

    path = out / "rpv_summary.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(
            ["mean_rpv_vision", "mean_rpv_language", "mean_rpv_head", "mean_rpv_tail", "tail_fraction"]
        )
        w.writerow(
            [
                _fmt(stats.mean_rpv_vision),
                _fmt(stats.mean_rpv_language),
                _fmt(stats.mean_rpv_head),
                _fmt(stats.mean_rpv_tail),
                _fmt(stats.tail_fraction),
            ]
        )
    written.append(path)

    path = out / "specialization.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["concept", "n_tokens", "entropy_bits"])
        for concept in sorted(stats.specialization):
            w.writerow(
                [
                    concept,
                    stats.specialization_tokens.get(concept, 0),
                    _fmt(stats.specialization[concept]),
                ]
            )
    written.append(path)

    path = out / "accuracy.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["acc_overall", "acc_head", "acc_tail"])
        w.writerow(
            [_fmt(stats.accuracy_overall), _fmt(stats.accuracy_head), _fmt(stats.accuracy_tail)]
        )
    written.append(path)

    return written
