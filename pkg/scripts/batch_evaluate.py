"""Generate, extract and score one task over a range of seeds.

    python scripts/batch_evaluate.py --task pour --seeds 20 --demos 7
"""

import argparse
import json
import time

from bikvil.evaluation import aggregate, format_table, score_graph
from bikvil.pipeline import extract
from bikvil.synthgen import TASKS, ScenarioConfig, generate


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--task", choices=TASKS, default="pour")
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--first-seed", type=int, default=0)
    ap.add_argument("--demos", type=int, default=7)
    ap.add_argument("--noise", type=float, default=0.001)
    ap.add_argument("--pose-jitter", type=float, default=0.05)
    ap.add_argument("--start-lift", type=float, default=0.0)
    ap.add_argument("--json", help="write per-seed scores here")
    args = ap.parse_args()

    rows, t0 = [], time.perf_counter()
    for seed in range(args.first_seed, args.first_seed + args.seeds):
        cfg = ScenarioConfig(args.task, n_demos=args.demos, seed=seed, noise_sigma=args.noise,
                             pose_jitter=args.pose_jitter, start_lift=args.start_lift)
        dset, truth = generate(cfg)
        rows.append((f"seed {seed}", score_graph(extract(dset).graph, truth)))
    print(format_table(rows))
    summary = aggregate([s for _, s in rows])
    summary["seconds"] = round(time.perf_counter() - t0, 2)
    print(json.dumps(summary, indent=1))
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"items": [{"item": n, **s.to_json()} for n, s in rows], "aggregate": summary}, fh, indent=1)


if __name__ == "__main__":
    main()
