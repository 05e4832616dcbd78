"""Freezes Pearson chi-square statistics and p-values for chi2_tables.csv.

Statistics are exact rationals; p-values use mpmath at 50 digits.
"""
from fractions import Fraction

import mpmath

mpmath.mp.dps = 50

TABLES = [
    [[10, 0], [0, 10]],
    [[20, 15], [30, 35]],
    [[12, 5], [7, 9]],
    [[100, 80, 60], [40, 55, 70]],
    [[5, 9, 14, 3], [8, 2, 6, 11]],
    [[1000, 120], [900, 260], [450, 30]],
    [[30, 10], [28, 12], [25, 15], [22, 18], [20, 20]],
    [[5000, 3], [4990, 13]],
    [[400, 10], [380, 30], [350, 60], [300, 110]],
    [[50, 50], [50, 50]],
]


def pearson(t):
    n = sum(map(sum, t))
    rows = [sum(r) for r in t]
    cols = [sum(c) for c in zip(*t)]
    stat = Fraction(0)
    for i, r in enumerate(t):
        for j, v in enumerate(r):
            e = Fraction(rows[i] * cols[j], n)
            stat += (v - e) ** 2 / e
    return stat, (len(t) - 1) * (len(t[0]) - 1)


with open("chi2_tables.csv", "w") as f:
    f.write("table;df;statistic;p_value\n")
    for t in TABLES:
        stat, df = pearson(t)
        s = mpmath.mpf(stat.numerator) / stat.denominator
        p = mpmath.gammainc(mpmath.mpf(df) / 2, s / 2, mpmath.inf, regularized=True)
        table = "|".join(",".join(map(str, r)) for r in t)
        f.write(f"{table};{df};{mpmath.nstr(s, 20)};{mpmath.nstr(p, 20)}\n")
