"""Learn a task per seed and run the controller on a fresh scene instance.

    python scripts/batch_reproduce.py --task pour --seeds 20
"""

import argparse
import time

import numpy as np

from bikvil.bikac import KacParams, reproduce
from bikvil.pipeline import extract
from bikvil.synthgen import TASKS, ScenarioConfig, generate, generate_novel_scene


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--task", choices=TASKS, default="pour")
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--demos", type=int, default=7)
    ap.add_argument("--horizon", type=float, default=30.0)
    args = ap.parse_args()

    converged = 0
    for seed in range(args.seeds):
        cfg = ScenarioConfig(args.task, n_demos=args.demos, seed=seed)
        graph = extract(generate(cfg)[0]).graph
        t = time.perf_counter()
        log, _, _ = reproduce(graph, generate_novel_scene(cfg, seed=1000 + seed), KacParams(seed=seed),
                              horizon=args.horizon)
        v = log.verdict
        converged += v["converged"]
        worst = max((c["final_residual"] for c in v["constraints"].values() if c["top_priority"]), default=0.0)
        angles = [np.degrees(c["final_angle"]) for c in v["constraints"].values() if "final_angle" in c]
        print(f"seed {seed:3d}  converged {str(v['converged']):5}  t={v['time_to_converge']}  "
              f"worst top residual {worst * 1e3:6.2f} mm  pose angle {max(angles, default=0.0):5.2f} deg  "
              f"({time.perf_counter() - t:.1f} s)")
    print(f"{converged}/{args.seeds} converged")


if __name__ == "__main__":
    main()
