"""Scoring an extracted graph against generator ground truth."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .hmsr import HmsrGraph
from .synthgen import GroundTruth


@dataclass(frozen=True)
class GraphScore:
    precision: float
    recall: float
    true_positives: int
    n_predicted: int
    n_truth: int
    kind_accuracy: float  # over recovered edges: top-priority kind matches
    coordination_match: bool
    master_resolution: float  # fraction of bi-directional pairs resolved correctly; 1.0 when none
    missing: tuple
    spurious: tuple

    def to_json(self) -> dict:
        d = asdict(self)
        d["missing"] = [list(e) for e in self.missing]
        d["spurious"] = [list(e) for e in self.spurious]
        return d


def top_kind(graph: HmsrGraph, master: str, slave: str) -> str | None:
    cons = graph.edge(master, slave).constraints
    if not cons:
        return None
    return min(cons, key=lambda c: c.priority).kind.value


def score_graph(graph: HmsrGraph, truth: GroundTruth) -> GraphScore:
    got = graph.edge_set()
    want = truth.edge_set()
    tp = got & want
    precision = len(tp) / len(got) if got else (1.0 if not want else 0.0)
    recall = len(tp) / len(want) if want else 1.0
    expected = {(e.master, e.slave): e.kinds for e in truth.edges}
    kinds_ok = [top_kind(graph, m, s) in expected[(m, s)][:1] for m, s in sorted(tp)]
    resolved = graph.meta.get("resolved_masters", {})
    masters = []
    for m, s in truth.resolved_masters:
        key = "|".join(sorted((m, s)))
        masters.append(resolved.get(key) == m and (m, s) in got)
    coord = graph.coordination.value if graph.coordination is not None else None
    return GraphScore(
        precision=float(precision),
        recall=float(recall),
        true_positives=len(tp),
        n_predicted=len(got),
        n_truth=len(want),
        kind_accuracy=float(np.mean(kinds_ok)) if kinds_ok else 1.0,
        coordination_match=coord == truth.coordination,
        master_resolution=float(np.mean(masters)) if masters else 1.0,
        missing=tuple(sorted(want - got)),
        spurious=tuple(sorted(got - want)),
    )


def aggregate(rows: list[GraphScore]) -> dict:
    """Mean scores over a batch plus pooled (micro) precision and recall."""
    if not rows:
        return {}
    tp = sum(r.true_positives for r in rows)
    pred = sum(r.n_predicted for r in rows)
    true = sum(r.n_truth for r in rows)
    return {
        "n": len(rows),
        "precision": float(np.mean([r.precision for r in rows])),
        "recall": float(np.mean([r.recall for r in rows])),
        "pooled_precision": tp / pred if pred else 1.0,
        "pooled_recall": tp / true if true else 1.0,
        "kind_accuracy": float(np.mean([r.kind_accuracy for r in rows])),
        "coordination_accuracy": float(np.mean([r.coordination_match for r in rows])),
        "master_resolution": float(np.mean([r.master_resolution for r in rows])),
    }


def format_table(rows: list[tuple[str, GraphScore]]) -> str:
    head = ("item", "precision", "recall", "kinds", "coord", "master")
    body = [(name, f"{s.precision:.3f}", f"{s.recall:.3f}", f"{s.kind_accuracy:.3f}",
             "yes" if s.coordination_match else "no", f"{s.master_resolution:.2f}") for name, s in rows]
    widths = [max(len(r[i]) for r in [head, *body]) for i in range(len(head))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in [head, *body]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
