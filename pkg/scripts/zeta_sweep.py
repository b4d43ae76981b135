"""Spectral zeta-derivative differences over a sweep of flat twists.

Writes a CSV with theta, the difference against the trivial bundle, its error
certificate and the predicted soup expectation exp(alpha * D).
"""

import argparse
import csv
import math
import sys

import numpy as np

from loopdet import connection as cn
from loopdet import geometry as geo
from loopdet import spectral as sp


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=11, help="points on theta_1 in [0, 1/2]")
    ap.add_argument("--theta2", type=float, default=0.0)
    ap.add_argument("--mass", type=float, default=1.0)
    ap.add_argument("--alpha", type=float, default=1.0)
    ap.add_argument("--out", default="-")
    args = ap.parse_args(argv)

    torus = geo.TorusSpec.unit(2)
    ref = sp.SpectralModel(torus, cn.trivial(), args.mass)
    rows = []
    for th in np.linspace(0.0, 0.5, args.n):
        model = sp.SpectralModel(torus, cn.flat_abelian([th, args.theta2]), args.mass)
        z = sp.zeta_prime_diff(ref, model)
        rows.append([th, args.theta2, z.value, z.error, math.exp(args.alpha * z.value)])

    fh = sys.stdout if args.out == "-" else open(args.out, "w", newline="")
    w = csv.writer(fh)
    w.writerow(["theta1", "theta2", "zeta_prime_diff", "error", "ratio"])
    w.writerows(rows)
    if fh is not sys.stdout:
        fh.close()


if __name__ == "__main__":
    main()
