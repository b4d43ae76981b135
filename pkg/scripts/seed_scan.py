"""Rerun one config under several seeds and compare every pair of records.

Reports the fraction of payload keys with |z| <= 3 per pair; a healthy
estimator keeps it near 0.997.
"""

import argparse
import copy
import itertools

import yaml

from loopdet import cli


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--replicas", type=int, default=None, help="override the replica count")
    args = ap.parse_args(argv)

    with open(args.config) as fh:
        raw = yaml.safe_load(fh)
    records = {}
    for s in args.seeds:
        r = copy.deepcopy(raw)
        r["seed"] = s
        if args.replicas:
            r["replicas"] = args.replicas
        records[s] = cli.run_config(cli.parse_config(r), write=False)
        print(f"seed {s}: status={records[s]['status']}")
    for a, b in itertools.combinations(args.seeds, 2):
        rows = cli.compare_records(records[a], records[b])
        ok = sum(abs(r["z"]) <= 3 for r in rows)
        worst = max(rows, key=lambda r: abs(r["z"]))
        print(f"{a} vs {b}: {ok}/{len(rows)} keys within 3 sigma, worst {worst['key']} z={worst['z']:.2f}")


if __name__ == "__main__":
    main()
