#!/usr/bin/env python3
"""Label-flip poisoning study: flip a fraction of one client's training labels
and track how the boosted aggregation weight of that client evolves per round.

Writes <out>/weights.csv with one row per (seed, round) and prints a summary of
how often the poisoned client stays below the uniform weight 1/N.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from fedboost.config import ExperimentConfig, two_client_noniid
from fedboost.runner import run_experiment


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--samples", type=int, default=4000, help="samples per client")
    parser.add_argument("--rounds", type=int, default=10)
    parser.add_argument("--seeds", type=str, default="1,2,3")
    parser.add_argument("--flip", type=float, default=0.5, help="label-flip fraction")
    parser.add_argument("--poison-client", type=int, default=2, choices=(1, 2))
    parser.add_argument("--out", type=str, default="results/poisoning")
    args = parser.parse_args()

    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)
    rows = ["seed,round,weight_clean,weight_poisoned,global_test_acc"]
    poisoned_idx = args.poison_client - 1
    clean_idx = 1 - poisoned_idx
    below, total = 0, 0

    for seed in (int(s) for s in args.seeds.split(",")):
        cfg = ExperimentConfig(
            clients=two_client_noniid(
                args.samples,
                master_seed=seed,
                poison_client=args.poison_client,
                poison_flip_frac=args.flip,
            ),
            master_seed=seed,
            rounds=args.rounds,
            aggregator="fedboosting",
            weighting_mode="score",
        )
        result = run_experiment(cfg)
        for rec in result.records:
            w = rec.weights
            rows.append(
                f"{seed},{rec.round},{w[clean_idx]!r},{w[poisoned_idx]!r},"
                f"{rec.global_test_acc!r}"
            )
            if rec.round > 3:
                total += 1
                below += w[poisoned_idx] < 1.0 / len(w)
        print(
            f"seed {seed}: final poisoned weight {result.records[-1].weights[poisoned_idx]:.3f}, "
            f"final acc {result.final_test_acc:.4f}"
        )

    (out_root / "weights.csv").write_text("\n".join(rows) + "\n")
    print(f"poisoned client below 1/N in {below}/{total} rounds after round 3")
    print(f"weights written to {out_root / 'weights.csv'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
