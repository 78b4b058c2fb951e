"""Average synthetic weights and per-candidate bias in one Monte Carlo cell.

Shows which candidates the combination leans on and how far each one is from
the truth. Example:

    python3 scripts/weight_diagnostics.py --dgm 1 --n 1000 --eta 2 --R 100
"""

import argparse
import warnings

import numpy as np

from synthcace.data import MonotonicityWarning
from synthcace.estimators import default_registry, estimate_all
from synthcace.resample import bootstrap_sigma, substream
from synthcace.simulation import Dgm1Config, Dgm2Config, generate
from synthcace.synthesis import synthesize


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--dgm", type=int, default=1, choices=(1, 2))
    ap.add_argument("--n", type=int, default=500)
    ap.add_argument("--eta", type=float, default=0.0)
    ap.add_argument("--alpha-c", type=float, default=0.0)
    ap.add_argument("--R", type=int, default=100)
    ap.add_argument("--B", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = Dgm1Config(n=args.n, eta=args.eta) if args.dgm == 1 else Dgm2Config(n=args.n, alpha_c=args.alpha_c)
    reg = default_registry()
    weights, values, truth, ids = [], [], None, None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MonotonicityWarning)
        for r in range(args.R):
            data, truth = generate(args.dgm, cfg, substream(args.seed, r, 0))
            est = estimate_all(data, reg)
            m = bootstrap_sigma(data, reg, args.B, seed=r, ids=est.ids)
            sr = synthesize(est, m, "raw")
            ids = ids or sr.estimates.ids
            if sr.estimates.ids != ids:
                continue
            weights.append(sr.weights.b1)
            values.append(sr.estimates.theta1)
    w, v = np.array(weights), np.array(values)
    print(f"{len(w)} replications, truth {truth}")
    print(f"{'candidate':<10}{'mean weight':>12}{'bias':>9}{'sd':>8}")
    for j, name in enumerate(ids):
        print(f"{name:<10}{w[:, j].mean():>12.3f}{v[:, j].mean() - truth:>9.4f}{v[:, j].std():>8.4f}")
    print(f"{'reference':<10}{1 - w.sum(axis=1).mean():>12.3f}")


if __name__ == "__main__":
    main()
