"""MV frontier and MMV value of one market under nested cones.

    python scripts/frontier_by_cone.py [config.json] [--points 21]

Enlarging the cone can only raise the value; the table shows by how much
and where the frontier's minimum-variance point sits.
"""

import argparse
from pathlib import Path

import numpy as np

from mmvlab.bsde import solve_deterministic, y_from_p2
from mmvlab.cone import ConeConstraint
from mmvlab.config import ExperimentConfig
from mmvlab.model import discount_h
from mmvlab.strategy import mmv_value, mv_frontier, shifted_endowment

ROOT = Path(__file__).resolve().parent.parent


def nested_cones(m):
    yield "no shorting", ConeConstraint.nonnegative(m)
    for i in range(m):
        flags = [j != i for j in range(m)]
        yield f"asset {i + 1} free", ConeConstraint.orthant(flags)
    yield "unconstrained", ConeConstraint.unconstrained(m)


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("config", nargs="?", default=str(ROOT / "configs" / "binding_orthant.json"))
    ap.add_argument("--points", type=int, default=21)
    args = ap.parse_args()

    cfg = ExperimentConfig.load(args.config)
    market, ins = cfg.build_market(), cfg.build_insurance()
    if market.is_random:
        raise SystemExit("this script needs deterministic coefficients")
    h0 = float(discount_h(market, 0.0))
    xs = shifted_endowment(market, ins, cfg.x)
    dt = cfg.solver.dt

    print(f"{'cone':<16} {'P2_0':>10} {'P1_0':>10} {'z_hat':>10} {'MV value':>10} {'MMV value':>10}")
    fronts = {}
    for label, cone in nested_cones(market.m):
        P2 = solve_deterministic("P2", market, ins, cone, dt)
        P1 = solve_deterministic("P1", market, ins, cone, dt)
        Y = y_from_p2(P2, market)
        fr = mv_frontier(P1.initial_value, P2.initial_value, h0, xs, cfg.theta)
        fronts[label] = fr
        print(f"{label:<16} {P2.initial_value:10.6f} {P1.initial_value:10.6f} {fr.z_hat:10.6f} "
              f"{fr.value:10.6f} {mmv_value(Y.initial_value, h0, xs, cfg.theta):10.6f}")

    base = xs * h0
    zs = np.linspace(base - 0.5, base + 1.0, args.points)
    print()
    print("variance F(z) along the frontier")
    print(f"{'z':>8} " + " ".join(f"{label:>16}" for label in fronts))
    for z in zs:
        print(f"{z:8.4f} " + " ".join(f"{fr(z).F:16.6g}" for fr in fronts.values()))


if __name__ == "__main__":
    main()
