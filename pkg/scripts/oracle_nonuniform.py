"""Standalone evaluation of the non-uniform full-step set, used to freeze a regression value.

Written independently of the package: plain math, no numpy.
"""
import math
import sys


def spow(x, a):
    return math.copysign(abs(x) ** a, x)


def full_steps(S, N, c, p):
    k = math.ceil(S / N)
    lo, hi = spow(-c, 1.0 / p), spow(S - c, 1.0 / p)
    ls = [lo + (hi - lo) * i / k for i in range(k)]
    picked = set()
    for l in ls:
        v = math.floor(spow(l, p) + c + 0.5)
        picked.add(min(max(v, 0), S - 1))
    picked.add(0)
    for cand in sorted(range(S), key=lambda i: (abs(i - c), i)):
        if len(picked) >= k:
            break
        picked.add(cand)
    return sorted(picked)


if __name__ == "__main__":
    S, N, c, p = (int(sys.argv[1]), int(sys.argv[2]), float(sys.argv[3]), float(sys.argv[4])) if len(sys.argv) > 4 else (50, 5, 15.0, 1.4)
    print(full_steps(S, N, c, p))
