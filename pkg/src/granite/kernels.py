"""Hot inner loops with a numba path and a pure-numpy path.

Each public kernel dispatches on :data:`granite._accel.USE_NUMBA` unless a
``backend`` argument is given.  Both paths return identical results for the
integer kernels and agree to roundoff for the floating-point ones.
"""
import numpy as np

from . import _accel
from ._accel import njit


def _use_numba(backend):
    if backend is None:
        return _accel.USE_NUMBA
    return backend == "numba"


# --- Laguerre (power) assignment on a periodic grid -------------------------

def _laguerre_numpy(height, width, seeds, radii):
    rows = np.arange(height, dtype=np.float64)[:, None]
    cols = np.arange(width, dtype=np.float64)[None, :]
    best = np.full((height, width), np.inf)
    labels = np.zeros((height, width), dtype=np.int32)
    for m in range(seeds.shape[0]):
        dr = np.abs(rows - seeds[m, 0])
        dr = np.minimum(dr, height - dr)
        dc = np.abs(cols - seeds[m, 1])
        dc = np.minimum(dc, width - dc)
        power = dr * dr + dc * dc - radii[m] * radii[m]
        closer = power < best
        best = np.where(closer, power, best)
        labels[closer] = m
    return labels


@njit
def _laguerre_numba(height, width, seeds, radii):
    labels = np.zeros((height, width), dtype=np.int32)
    nseed = seeds.shape[0]
    for i in range(height):
        for j in range(width):
            best = np.inf
            arg = 0
            for m in range(nseed):
                dr = abs(i - seeds[m, 0])
                dr = min(dr, height - dr)
                dc = abs(j - seeds[m, 1])
                dc = min(dc, width - dc)
                power = dr * dr + dc * dc - radii[m] * radii[m]
                if power < best:
                    best = power
                    arg = m
            labels[i, j] = arg
    return labels


def laguerre_assign(height, width, seeds, radii, backend=None):
    """Label each pixel with the seed minimising periodic ``dist**2 - r**2``.

    Ties go to the lowest seed index.
    """
    seeds = np.ascontiguousarray(seeds, dtype=np.float64)
    radii = np.ascontiguousarray(radii, dtype=np.float64)
    if _use_numba(backend):
        return _laguerre_numba(int(height), int(width), seeds, radii)
    return _laguerre_numpy(int(height), int(width), seeds, radii)


# --- connected components: two-pass union-find, 8-connectivity -------------

def _find(parent, x):
    root = x
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        nxt = parent[x]
        parent[x] = root
        x = nxt
    return root


def _label8(mask, find):
    height, width = mask.shape
    labels = np.zeros((height, width), dtype=np.int32)
    parent = np.zeros(height * width + 1, dtype=np.int32)
    nxt = 1
    for i in range(height):
        for j in range(width):
            if not mask[i, j]:
                continue
            # already-visited neighbours: W, NW, N, NE
            best = 0
            for k in range(4):
                ii = i + (0, -1, -1, -1)[k]
                jj = j + (-1, -1, 0, 1)[k]
                if ii < 0 or jj < 0 or jj >= width:
                    continue
                lab = labels[ii, jj]
                if lab == 0:
                    continue
                if best == 0:
                    best = lab
                else:
                    ra = find(parent, best)
                    rb = find(parent, lab)
                    if ra < rb:
                        parent[rb] = ra
                    elif rb < ra:
                        parent[ra] = rb
            if best == 0:
                parent[nxt] = nxt
                labels[i, j] = nxt
                nxt += 1
            else:
                labels[i, j] = best
    # second pass: resolve roots, renumber by first row-major appearance
    remap = np.zeros(nxt, dtype=np.int32)
    count = 0
    for i in range(height):
        for j in range(width):
            lab = labels[i, j]
            if lab == 0:
                continue
            root = find(parent, lab)
            if remap[root] == 0:
                count += 1
                remap[root] = count
            labels[i, j] = remap[root]
    return labels, count


_find_jit = njit(_find)
_label8_jit = njit(_label8)


def label_components(mask, backend=None):
    """8-connected component labels (0 = background) and component count.

    Labels are numbered by first appearance in row-major order.
    """
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    if _use_numba(backend):
        labels, count = _label8_jit(mask, _find_jit)
    else:
        labels, count = _label8(mask, _find)
    return labels, int(count)


# --- local maxima with a row-major tie rule --------------------------------

_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


def _maxima_numpy(field):
    height, width = field.shape
    padded = np.pad(field, 1, mode="constant", constant_values=-np.inf)
    out = np.ones((height, width), dtype=np.bool_)
    for di, dj in _OFFSETS:
        nb = padded[1 + di:1 + di + height, 1 + dj:1 + dj + width]
        earlier = di < 0 or (di == 0 and dj < 0)
        if earlier:
            out &= field > nb
        else:
            out &= field >= nb
    return out


@njit
def _maxima_numba(field):
    height, width = field.shape
    out = np.zeros((height, width), dtype=np.bool_)
    for i in range(height):
        for j in range(width):
            v = field[i, j]
            ok = True
            for di in range(-1, 2):
                for dj in range(-1, 2):
                    if di == 0 and dj == 0:
                        continue
                    ii = i + di
                    jj = j + dj
                    if ii < 0 or jj < 0 or ii >= height or jj >= width:
                        continue
                    nb = field[ii, jj]
                    if di < 0 or (di == 0 and dj < 0):
                        if not v > nb:
                            ok = False
                    elif not v >= nb:
                        ok = False
            out[i, j] = ok
    return out


def local_maxima(field, backend=None):
    """Mask of 8-neighbourhood local maxima.

    A pixel qualifies when it is >= every neighbour and strictly > the
    neighbours preceding it in row-major order, so a plateau keeps only its
    first pixel.
    """
    field = np.ascontiguousarray(field, dtype=np.float64)
    if _use_numba(backend):
        return _maxima_numba(field)
    return _maxima_numpy(field)


# --- per-pixel 6x6 stiffness times 6-vector ---------------------------------

def _matvec_numpy(mats, vecs):
    return np.einsum("pij,pj->pi", mats, vecs)


@njit
def _matvec_numba(mats, vecs):
    npix = mats.shape[0]
    out = np.empty((npix, 6))
    for p in range(npix):
        for i in range(6):
            acc = 0.0
            for j in range(6):
                acc += mats[p, i, j] * vecs[p, j]
            out[p, i] = acc
    return out


def batched_matvec6(mats, vecs, backend=None):
    """``out[p] = mats[p] @ vecs[p]`` for (P, 6, 6) matrices and (P, 6) vectors."""
    mats = np.ascontiguousarray(mats, dtype=np.float64)
    vecs = np.ascontiguousarray(vecs, dtype=np.float64)
    if _use_numba(backend):
        return _matvec_numba(mats, vecs)
    return _matvec_numpy(mats, vecs)
