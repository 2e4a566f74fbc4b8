"""Closed-form recomputation of the canonical per-row parameter counts.

A convolution of c_in -> c_out channels with a k x k kernel plus batch
norm holds k*k*c_in*c_out + 2*c_out parameters (depthwise: k*k*c + 2*c).
An inverted bottleneck t, c_in -> c_out therefore holds

    h = max(1, floor(t * c_in + 0.5))        hidden width
    expand  1x1: c_in * h + 2h
    dwise   3x3: 9h + 2h
    project 1x1: h * c_out + 2 c_out
    total: h * (c_in + c_out + 13) + 2 * c_out

Upsample+concat and the output sigmoid are parameter-free.  The audit
rebuilds the 19-row layout from those formulas alone and compares with
the canonical printed counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


def hidden(t: float, c_in: int) -> int:
    return max(1, int(math.floor(t * c_in + 0.5)))


def conv_params(c_in: int, c_out: int, k: int) -> int:
    return k * k * c_in * c_out + 2 * c_out


def dwise_params(c: int, k: int = 3) -> int:
    return k * k * c + 2 * c


def bottleneck_params(t: float, c_in: int, c_out: int) -> int:
    h = hidden(t, c_in)
    return h * (c_in + c_out + 13) + 2 * c_out


@dataclass
class Row:
    operator: str
    t: float | None
    c: int
    n: int
    s: int
    expected: int
    computed: int

    @property
    def ok(self) -> bool:
        return self.expected == self.computed


# (operator, t, c_out, n, s, printed parameter count); channels flow top
# to bottom starting from the 3-channel image, decoder inputs pick up the
# skip widths 32/24/16/3.
_LAYOUT = [
    ("conv", None, 32, 1, 2, 928),
    ("dwisesep", 1, 16, 1, 1, 896),
    ("bottleneck", 6, 24, 1, 2, 5136),
    ("resbottleneck", 6, 24, 1, 1, 8832),
    ("bottleneck", 6, 32, 1, 2, 10000),
    ("resbottleneck", 6, 32, 2, 1, 29696),
    ("bottleneck", 6, 64, 1, 2, 21056),
    ("resbottleneck", 6, 64, 3, 1, 162816),
    ("bottleneck", 6, 96, 1, 1, 66624),
    ("resbottleneck", 6, 96, 2, 1, 236544),
    ("upconcat", None, 128, 1, 1, 0),
    ("bottleneck", 0.15, 64, 1, 1, 4023),
    ("upconcat", None, 88, 1, 1, 0),
    ("bottleneck", 0.15, 44, 1, 1, 1973),
    ("upconcat", None, 60, 1, 1, 0),
    ("bottleneck", 0.15, 30, 1, 1, 987),
    ("upconcat", None, 33, 1, 1, 0),
    ("bottleneck", 0.15, 1, 1, 1, 237),
    ("sigmoid", None, 1, 1, 1, 0),
]

CANONICAL_TOTAL = 549_748


def audit_table1(verbose: bool = True) -> tuple[bool, list[Row]]:
    """Recompute every row; prints a pass/fail table unless silenced."""
    rows: list[Row] = []
    c_in = 3
    for operator, t, c, n, s, expected in _LAYOUT:
        if operator == "conv":
            computed = conv_params(c_in, c, k=3)
        elif operator == "dwisesep":
            computed = dwise_params(c_in) + conv_params(c_in, c, k=1)
        elif operator in ("bottleneck", "resbottleneck"):
            computed = bottleneck_params(t, c_in, c)
            if operator == "resbottleneck":
                computed *= n    # repeats keep c_in == c_out
        else:
            computed = 0
        rows.append(Row(operator, t, c, n, s, expected, computed))
        c_in = c
    total = sum(r.computed for r in rows)
    all_ok = all(r.ok for r in rows) and total == CANONICAL_TOTAL
    if verbose:
        print(f"{'operator':<15} {'t':>5} {'c':>4} {'n':>2} {'s':>2} "
              f"{'expected':>9} {'computed':>9}  verdict")
        for r in rows:
            t = "-" if r.t is None else f"{r.t:g}"
            print(f"{r.operator:<15} {t:>5} {r.c:>4} {r.n:>2} {r.s:>2} "
                  f"{r.expected:>9,} {r.computed:>9,}  "
                  f"{'ok' if r.ok else 'MISMATCH'}")
        print(f"total expected {CANONICAL_TOTAL:,}, computed {total:,}: "
              f"{'ok' if total == CANONICAL_TOTAL else 'MISMATCH'}")
    return all_ok, rows


if __name__ == "__main__":
    ok, _ = audit_table1()
    raise SystemExit(0 if ok else 1)
