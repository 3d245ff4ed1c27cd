"""Pure-Python kernels. Bit-for-bit twin of ``_ckernels.pyx``."""
from __future__ import annotations

import math
from bisect import bisect_left, bisect_right

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_TWO_PI = 6.283185307179586
_INV_2_53 = 1.0 / 9007199254740992.0


def splitmix64(x: int) -> int:
    z = (x + _GOLDEN) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def hash4(seed: int, a: int, b: int, c: int) -> int:
    h = splitmix64(seed & _MASK)
    h = splitmix64(h ^ (a & _MASK))
    h = splitmix64(h ^ (b & _MASK))
    return splitmix64(h ^ (c & _MASK))


def hash_uniform(seed: int, a: int, b: int, c: int) -> float:
    """Uniform draw in [0, 1) keyed on the four integers."""
    return (hash4(seed, a, b, c) >> 11) * _INV_2_53


def hash_normal(seed: int, a: int, b: int, c: int) -> float:
    """Standard normal draw keyed on the four integers (Box-Muller)."""
    h1 = hash4(seed, a, b, c)
    h2 = splitmix64(h1)
    u1 = ((h1 >> 11) + 1) * _INV_2_53
    u2 = (h2 >> 11) * _INV_2_53
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(_TWO_PI * u2)


def airtime_ms(
    sf: int,
    bandwidth: int,
    cr_denominator: int,
    preamble: int,
    explicit_header: bool,
    crc_on: bool,
    low_datarate_optimize: bool,
    payload_len: int,
) -> float:
    ih = 0 if explicit_header else 1
    crc = 1 if crc_on else 0
    de = 1 if low_datarate_optimize else 0
    num = 8 * payload_len - 4 * sf + 28 + 16 * crc - 20 * ih
    den = 4 * (sf - 2 * de)
    blocks = -(-num // den)
    # (CR + 4) with CR = 1..4 is the coding-rate denominator
    payload_symbols = 8 + max(blocks * cr_denominator, 0)
    t_sym_ms = (1 << sf) * 1000.0 / bandwidth
    return (preamble + 4.25 + payload_symbols) * t_sym_ms


def path_loss_db(
    horizontal: float,
    dz: float,
    floors_crossed: int,
    walls: int,
    pl0: float,
    exponent: float,
    wall_db: float,
    floor_db: float,
    d0: float,
) -> float:
    d = math.sqrt(horizontal * horizontal + dz * dz)
    if d < d0:
        d = d0
    return pl0 + 10.0 * exponent * math.log10(d / d0) + walls * wall_db + floors_crossed * floor_db


def path_loss_matrix(
    xs, ys, floors, blocks, floor_height: float, wall_spacing: float,
    pl0: float, exponent: float, wall_db: float, floor_db: float, d0: float,
) -> list[float]:
    """Row-major n*n matrix of static path loss; diagonal is 0."""
    n = len(xs)
    out = [0.0] * (n * n)
    for i in range(n):
        for j in range(i + 1, n):
            dx = xs[i] - xs[j]
            dy = ys[i] - ys[j]
            horiz = math.sqrt(dx * dx + dy * dy)
            nf = abs(floors[i] - floors[j])
            walls = int(math.floor(horiz / wall_spacing)) + (2 if blocks[i] != blocks[j] else 0)
            loss = path_loss_db(horiz, nf * floor_height, nf, walls, pl0, exponent, wall_db, floor_db, d0)
            out[i * n + j] = loss
            out[j * n + i] = loss
    return out


def max_window_airtime(starts, ends, window: float) -> float:
    """Largest total airtime inside any window of the given length.

    ``starts``/``ends`` describe non-overlapping intervals sorted by start.
    """
    n = len(starts)
    if n == 0:
        return 0.0
    prefix = [0.0] * (n + 1)
    for k in range(n):
        prefix[k + 1] = prefix[k] + (ends[k] - starts[k])

    def covered(s: float, e: float) -> float:
        i = bisect_right(ends, s)
        j = bisect_left(starts, e) - 1
        if j < i:
            return 0.0
        total = prefix[j + 1] - prefix[i]
        if starts[i] < s:
            total -= s - starts[i]
        if ends[j] > e:
            total -= ends[j] - e
        return total

    best = 0.0
    for k in range(n):
        v = covered(starts[k], starts[k] + window)
        if v > best:
            best = v
        v = covered(ends[k] - window, ends[k])
        if v > best:
            best = v
    return best
