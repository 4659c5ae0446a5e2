"""End-to-end extraction: preprocessing through coordination."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .errors import ConfigError
from .geomcon import ExtractionConfig
from .hmsr import (
    HmsrConfig,
    HmsrGraph,
    build_candidate_graph,
    classify_coordination,
    resolve_moving_pairs,
    truncate,
)
from .saliency import (
    GraspDetectorConfig,
    SaliencyConfig,
    create_virtual_objects,
    find_grasps,
    motion_saliency,
)
from .trajdata import DemonstrationSet, preprocess

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PreprocessConfig:
    window: int = 11
    polyorder: int = 3
    z_thresh: float = 3.5

    def validate(self) -> "PreprocessConfig":
        if self.window < 3 or self.window % 2 == 0:
            raise ConfigError("window must be an odd integer >= 3", "trajdata")
        if not 0 <= self.polyorder < self.window:
            raise ConfigError("polyorder must be in [0, window)", "trajdata")
        if not self.z_thresh > 0:
            raise ConfigError("z_thresh must be > 0", "trajdata")
        return self


@dataclass
class ExtractionResult:
    graph: HmsrGraph
    report: dict = field(default_factory=dict)


def extract(dset: DemonstrationSet, pre: PreprocessConfig = PreprocessConfig(),
            sal: SaliencyConfig = SaliencyConfig(), grasp: GraspDetectorConfig = GraspDetectorConfig(),
            geo: ExtractionConfig = ExtractionConfig(), hm: HmsrConfig = HmsrConfig(),
            meta: dict | None = None) -> ExtractionResult:
    for cfg in (pre, sal, grasp, geo, hm):
        cfg.validate()
    smoothed, removed = preprocess(dset, pre.window, pre.polyorder, pre.z_thresh)
    saliency = motion_saliency(smoothed, sal)
    log.info("static: %s, moving: %s", saliency.static, saliency.moving)
    grasps = find_grasps(smoothed, grasp)
    log.info("grasps: %s", grasps.grasped)
    with_virtuals = create_virtual_objects(smoothed, saliency)
    resolved, ratios = resolve_moving_pairs(with_virtuals, saliency, hm)
    candidate = build_candidate_graph(with_virtuals, saliency, grasps, resolved)
    graph = truncate(candidate, with_virtuals, geo, hm, grasps)
    coordination = classify_coordination(graph, grasps, with_virtuals, hm)
    graph_meta = dict(graph.meta)
    graph_meta.update(meta or {})
    graph_meta.update({
        "task": dset.task_name,
        "n_demos": len(dset.demos),
        "duration": float(sum(d.duration for d in smoothed.demos) / len(smoothed.demos)),
        "dt": float(smoothed.demos[0].dt),
        "n_frames": int(smoothed.demos[0].n_frames),
        "scene_scale": saliency.scene_scale,
        "end_pose_window": {"fraction": hm.end_fraction, "mode": "final-segment rigid registration"},
        "resolved_masters": {k: v for k, v in ((("|".join(sorted(p))), m) for p, m in resolved.items())},
    })
    graph = HmsrGraph(graph.nodes, graph.edges, coordination, graph_meta)
    report = {
        "saliency": saliency.to_json(),
        "grasps": grasps.to_json(),
        "invariance_ratios": ratios,
        "removed_outliers": removed,
        "candidate_edges": sorted([e.master, e.slave] for e in candidate.edges),
    }
    return ExtractionResult(graph, report)
