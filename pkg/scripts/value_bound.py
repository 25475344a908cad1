"""Check the value-discrepancy bound on random stable linear systems with linear policies."""

import argparse
import dataclasses

from _common import emit
from veronica.experiments import value_bound_family

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--instances", type=int, default=50)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    args = p.parse_args()
    diags = value_bound_family(args.instances, args.samples, args.seed)
    rows = [{**dataclasses.asdict(d), "holds": d.holds} for d in diags]
    emit({"violations": sum(not d.holds for d in diags), "instances": rows}, args.out)
