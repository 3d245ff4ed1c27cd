# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels. Same semantics, bit for bit, as ``_pykernels``."""
from libc.math cimport sqrt, log, log10, cos, floor, fabs, ceil
from libc.stdint cimport uint64_t, int64_t

cdef double _TWO_PI = 6.283185307179586
cdef double _INV_2_53 = 1.0 / 9007199254740992.0


cdef inline uint64_t _mix(uint64_t x) nogil:
    cdef uint64_t z = x + <uint64_t>0x9E3779B97F4A7C15ULL
    z = (z ^ (z >> 30)) * <uint64_t>0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * <uint64_t>0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef inline uint64_t _u64(object v):
    return <uint64_t>(v & 0xFFFFFFFFFFFFFFFF)


cdef inline uint64_t _hash4(uint64_t seed, uint64_t a, uint64_t b, uint64_t c) nogil:
    cdef uint64_t h = _mix(seed)
    h = _mix(h ^ a)
    h = _mix(h ^ b)
    return _mix(h ^ c)


def splitmix64(x):
    return _mix(_u64(x))


def hash4(seed, a, b, c):
    return _hash4(_u64(seed), _u64(a), _u64(b), _u64(c))


def hash_uniform(seed, a, b, c):
    return (_hash4(_u64(seed), _u64(a), _u64(b), _u64(c)) >> 11) * _INV_2_53


def hash_normal(seed, a, b, c):
    cdef uint64_t h1 = _hash4(_u64(seed), _u64(a), _u64(b), _u64(c))
    cdef uint64_t h2 = _mix(h1)
    cdef double u1 = <double>((h1 >> 11) + 1) * _INV_2_53
    cdef double u2 = <double>(h2 >> 11) * _INV_2_53
    return sqrt(-2.0 * log(u1)) * cos(_TWO_PI * u2)


def airtime_ms(int sf, long bandwidth, int cr_denominator, int preamble,
               bint explicit_header, bint crc_on, bint low_datarate_optimize,
               int payload_len):
    cdef int ih = 0 if explicit_header else 1
    cdef int crc = 1 if crc_on else 0
    cdef int de = 1 if low_datarate_optimize else 0
    cdef long num = 8 * payload_len - 4 * sf + 28 + 16 * crc - 20 * ih
    cdef long den = 4 * (sf - 2 * de)
    cdef long blocks
    # ceil division for signed integers
    if num >= 0:
        blocks = (num + den - 1) // den
    else:
        blocks = -((-num) // den)
    cdef long payload_symbols = 8 + (blocks * cr_denominator if blocks * cr_denominator > 0 else 0)
    cdef double t_sym_ms = (<long>1 << sf) * 1000.0 / bandwidth
    return (preamble + 4.25 + payload_symbols) * t_sym_ms


cdef inline double _path_loss(double horizontal, double dz, long floors_crossed, long walls,
                              double pl0, double exponent, double wall_db, double floor_db,
                              double d0) nogil:
    cdef double d = sqrt(horizontal * horizontal + dz * dz)
    if d < d0:
        d = d0
    return pl0 + 10.0 * exponent * log10(d / d0) + walls * wall_db + floors_crossed * floor_db


def path_loss_db(double horizontal, double dz, long floors_crossed, long walls,
                 double pl0, double exponent, double wall_db, double floor_db, double d0):
    return _path_loss(horizontal, dz, floors_crossed, walls, pl0, exponent, wall_db, floor_db, d0)


def path_loss_matrix(xs, ys, floors, blocks, double floor_height, double wall_spacing,
                     double pl0, double exponent, double wall_db, double floor_db, double d0):
    cdef Py_ssize_t n = len(xs)
    cdef Py_ssize_t i, j
    cdef double dx, dy, horiz, loss
    cdef long nf, walls
    cdef list out = [0.0] * (n * n)
    cdef list cx = [float(v) for v in xs]
    cdef list cy = [float(v) for v in ys]
    cdef list cf = [int(v) for v in floors]
    for i in range(n):
        for j in range(i + 1, n):
            dx = <double>cx[i] - <double>cx[j]
            dy = <double>cy[i] - <double>cy[j]
            horiz = sqrt(dx * dx + dy * dy)
            nf = <long>cf[i] - <long>cf[j]
            if nf < 0:
                nf = -nf
            walls = <long>floor(horiz / wall_spacing)
            if blocks[i] != blocks[j]:
                walls += 2
            loss = _path_loss(horiz, nf * floor_height, nf, walls, pl0, exponent, wall_db, floor_db, d0)
            out[i * n + j] = loss
            out[j * n + i] = loss
    return out


cdef Py_ssize_t _bisect_right(double[:] a, double x, Py_ssize_t n) nogil:
    cdef Py_ssize_t lo = 0, hi = n, mid
    while lo < hi:
        mid = (lo + hi) // 2
        if x < a[mid]:
            hi = mid
        else:
            lo = mid + 1
    return lo


cdef Py_ssize_t _bisect_left(double[:] a, double x, Py_ssize_t n) nogil:
    cdef Py_ssize_t lo = 0, hi = n, mid
    while lo < hi:
        mid = (lo + hi) // 2
        if a[mid] < x:
            lo = mid + 1
        else:
            hi = mid
    return lo


cdef double _covered(double[:] starts, double[:] ends, double[:] prefix, Py_ssize_t n,
                     double s, double e) nogil:
    cdef Py_ssize_t i = _bisect_right(ends, s, n)
    cdef Py_ssize_t j = _bisect_left(starts, e, n) - 1
    cdef double total
    if j < i:
        return 0.0
    total = prefix[j + 1] - prefix[i]
    if starts[i] < s:
        total -= s - starts[i]
    if ends[j] > e:
        total -= ends[j] - e
    return total


def max_window_airtime(starts, ends, double window):
    cdef Py_ssize_t n = len(starts)
    if n == 0:
        return 0.0
    import array
    cdef double[:] s = array.array("d", starts)
    cdef double[:] e = array.array("d", ends)
    cdef double[:] prefix = array.array("d", [0.0] * (n + 1))
    cdef Py_ssize_t k
    cdef double best = 0.0, v
    for k in range(n):
        prefix[k + 1] = prefix[k] + (e[k] - s[k])
    for k in range(n):
        v = _covered(s, e, prefix, n, s[k], s[k] + window)
        if v > best:
            best = v
        v = _covered(s, e, prefix, n, e[k] - window, e[k])
        if v > best:
            best = v
    return best
