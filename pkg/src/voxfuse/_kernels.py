"""Hot-path kernels for trilinear gather/scatter.

Numba-compiled single-threaded loops when numba is importable, numpy
fallbacks otherwise; both paths compute corner weights in float64 from the
same fractional offsets, so results agree to float rounding. Half-precision
grids are read through an exact 65536-entry bit-pattern lookup table
because numba has no float16 support.
"""

from __future__ import annotations

import numpy as np

try:
    import numba as _nb

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _nb = None
    HAS_NUMBA = False

# exact float16 -> float32 conversion per bit pattern
HALF_LUT = np.arange(65536, dtype=np.uint16).view(np.float16).astype(np.float32)


def _corner_weights(frac: np.ndarray) -> np.ndarray:
    """(8, N) trilinear corner weights in the shared corner order."""
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    w = np.empty((8, frac.shape[0]), dtype=np.float64)
    w[0] = gx * gy * gz
    w[1] = fx * gy * gz
    w[2] = gx * fy * gz
    w[3] = fx * fy * gz
    w[4] = gx * gy * fz
    w[5] = fx * gy * fz
    w[6] = gx * fy * fz
    w[7] = fx * fy * fz
    return w


def _corner_flat(base_flat: np.ndarray, yz: int, z: int) -> np.ndarray:
    offs = np.array([0, yz, z, yz + z, 1, yz + 1, z + 1, yz + z + 1], dtype=np.int64)
    return base_flat[None, :] + offs[:, None]


# corner order used by the numpy paths above:
#   index bit 0 -> +x (stride yz), bit 1 -> +y (stride z), bit 2 -> +z (+1)
# the numba kernels unroll the same eight corners explicitly.


if HAS_NUMBA:

    @_nb.njit(cache=True)
    def _gather2_f32(base_flat, fx, fy, fz, yz, z, g1, g2, out1, out2):
        for i in range(base_flat.size):
            gx = 1.0 - fx[i]
            gy = 1.0 - fy[i]
            gz = 1.0 - fz[i]
            b = base_flat[i]
            w00 = gy * gz
            w01 = fy[i] * gz
            w10 = gy * fz[i]
            w11 = fy[i] * fz[i]
            c0 = gx * w00
            c1 = fx[i] * w00
            c2 = gx * w01
            c3 = fx[i] * w01
            c4 = gx * w10
            c5 = fx[i] * w10
            c6 = gx * w11
            c7 = fx[i] * w11
            out1[i] = (c0 * g1[b] + c1 * g1[b + yz] + c2 * g1[b + z]
                       + c3 * g1[b + yz + z] + c4 * g1[b + 1] + c5 * g1[b + yz + 1]
                       + c6 * g1[b + z + 1] + c7 * g1[b + yz + z + 1])
            out2[i] = (c0 * g2[b] + c1 * g2[b + yz] + c2 * g2[b + z]
                       + c3 * g2[b + yz + z] + c4 * g2[b + 1] + c5 * g2[b + yz + 1]
                       + c6 * g2[b + z + 1] + c7 * g2[b + yz + z + 1])

    @_nb.njit(cache=True)
    def _gather2_lut(base_flat, fx, fy, fz, yz, z, g1, g2, lut, out1, out2):
        for i in range(base_flat.size):
            gx = 1.0 - fx[i]
            gy = 1.0 - fy[i]
            gz = 1.0 - fz[i]
            b = base_flat[i]
            w00 = gy * gz
            w01 = fy[i] * gz
            w10 = gy * fz[i]
            w11 = fy[i] * fz[i]
            c0 = gx * w00
            c1 = fx[i] * w00
            c2 = gx * w01
            c3 = fx[i] * w01
            c4 = gx * w10
            c5 = fx[i] * w10
            c6 = gx * w11
            c7 = fx[i] * w11
            out1[i] = (c0 * lut[g1[b]] + c1 * lut[g1[b + yz]] + c2 * lut[g1[b + z]]
                       + c3 * lut[g1[b + yz + z]] + c4 * lut[g1[b + 1]]
                       + c5 * lut[g1[b + yz + 1]] + c6 * lut[g1[b + z + 1]]
                       + c7 * lut[g1[b + yz + z + 1]])
            out2[i] = (c0 * lut[g2[b]] + c1 * lut[g2[b + yz]] + c2 * lut[g2[b + z]]
                       + c3 * lut[g2[b + yz + z]] + c4 * lut[g2[b + 1]]
                       + c5 * lut[g2[b + yz + 1]] + c6 * lut[g2[b + z + 1]]
                       + c7 * lut[g2[b + yz + z + 1]])

    @_nb.njit(cache=True)
    def _gather1_f32(base_flat, fx, fy, fz, yz, z, g1, out1):
        for i in range(base_flat.size):
            gx = 1.0 - fx[i]
            gy = 1.0 - fy[i]
            gz = 1.0 - fz[i]
            b = base_flat[i]
            w00 = gy * gz
            w01 = fy[i] * gz
            w10 = gy * fz[i]
            w11 = fy[i] * fz[i]
            out1[i] = (gx * w00 * g1[b] + fx[i] * w00 * g1[b + yz]
                       + gx * w01 * g1[b + z] + fx[i] * w01 * g1[b + yz + z]
                       + gx * w10 * g1[b + 1] + fx[i] * w10 * g1[b + yz + 1]
                       + gx * w11 * g1[b + z + 1] + fx[i] * w11 * g1[b + yz + z + 1])

    @_nb.njit(cache=True)
    def _gather1_lut(base_flat, fx, fy, fz, yz, z, g1, lut, out1):
        for i in range(base_flat.size):
            gx = 1.0 - fx[i]
            gy = 1.0 - fy[i]
            gz = 1.0 - fz[i]
            b = base_flat[i]
            w00 = gy * gz
            w01 = fy[i] * gz
            w10 = gy * fz[i]
            w11 = fy[i] * fz[i]
            out1[i] = (gx * w00 * lut[g1[b]] + fx[i] * w00 * lut[g1[b + yz]]
                       + gx * w01 * lut[g1[b + z]] + fx[i] * w01 * lut[g1[b + yz + z]]
                       + gx * w10 * lut[g1[b + 1]] + fx[i] * w10 * lut[g1[b + yz + 1]]
                       + gx * w11 * lut[g1[b + z + 1]]
                       + fx[i] * w11 * lut[g1[b + yz + z + 1]])

    @_nb.njit(cache=True)
    def _scatter_label_max(base_local, fx, fy, fz, scores, labels, rays, yz, z,
                           best_s, best_l, best_r, touched):
        """Per-voxel winner among same-frame label contributions.

        Highest score wins, ties take the lowest ray index. Returns the
        touched count; `best_s` must start at -1.
        """
        count = 0
        offs = (0, yz, z, yz + z, 1, yz + 1, z + 1, yz + z + 1)
        for i in range(base_local.size):
            s = scores[i]
            if s <= 0.0:
                continue
            gx = 1.0 - fx[i]
            gy = 1.0 - fy[i]
            gz = 1.0 - fz[i]
            cw = (gx * gy * gz, fx[i] * gy * gz, gx * fy[i] * gz,
                  fx[i] * fy[i] * gz, gx * gy * fz[i], fx[i] * gy * fz[i],
                  gx * fy[i] * fz[i], fx[i] * fy[i] * fz[i])
            b = base_local[i]
            for c in range(8):
                if cw[c] <= 0.0:
                    continue
                j = b + offs[c]
                bs = best_s[j]
                if bs < 0.0:
                    touched[count] = j
                    count += 1
                if s > bs or (s == bs and rays[i] < best_r[j]):
                    best_s[j] = s
                    best_l[j] = labels[i]
                    best_r[j] = rays[i]
        return count

    @_nb.njit(cache=True)
    def _scatter8(base_local, fx, fy, fz, uw, upd, yz, z, acc_w, acc_wv, touched):
        """Accumulate contributions and record first-touched local indices.

        Returns the number of touched voxels; `touched[:count]` lists them
        in first-touch order.
        """
        count = 0
        for i in range(base_local.size):
            w = uw[i]
            if w <= 0.0:
                continue
            gx = 1.0 - fx[i]
            gy = 1.0 - fy[i]
            gz = 1.0 - fz[i]
            b = base_local[i]
            wv = w * upd[i]
            w00 = gy * gz
            w01 = fy[i] * gz
            w10 = gy * fz[i]
            w11 = fy[i] * fz[i]
            for off, cw in ((0, gx * w00), (yz, fx[i] * w00), (z, gx * w01),
                            (yz + z, fx[i] * w01), (1, gx * w10),
                            (yz + 1, fx[i] * w10), (z + 1, gx * w11),
                            (yz + z + 1, fx[i] * w11)):
                if cw <= 0.0:
                    continue
                j = b + off
                if acc_w[j] == 0.0:
                    touched[count] = j
                    count += 1
                acc_w[j] += cw * w
                acc_wv[j] += cw * wv
        return count


def gather_channels(grids, base_flat, frac, dims):
    """Trilinear interpolation of one or more grids at the given samples.

    `grids` is a sequence of (X, Y, Z) arrays (float16 or float32);
    returns a list of float32 (N,) arrays, one per grid.
    """
    yz = dims[1] * dims[2]
    z = dims[2]
    n = base_flat.size
    fx = np.ascontiguousarray(frac[:, 0])
    fy = np.ascontiguousarray(frac[:, 1])
    fz = np.ascontiguousarray(frac[:, 2])

    outs = [np.empty(n, dtype=np.float32) for _ in grids]
    if HAS_NUMBA:
        i = 0
        while i < len(grids):
            pair = grids[i:i + 2]
            flats = [g.reshape(-1) for g in pair]
            if len(pair) == 2 and pair[0].dtype == pair[1].dtype:
                if pair[0].dtype == np.float16:
                    _gather2_lut(base_flat, fx, fy, fz, yz, z,
                                 flats[0].view(np.uint16), flats[1].view(np.uint16),
                                 HALF_LUT, outs[i], outs[i + 1])
                else:
                    _gather2_f32(base_flat, fx, fy, fz, yz, z,
                                 flats[0].astype(np.float32, copy=False),
                                 flats[1].astype(np.float32, copy=False),
                                 outs[i], outs[i + 1])
                i += 2
            else:
                if pair[0].dtype == np.float16:
                    _gather1_lut(base_flat, fx, fy, fz, yz, z,
                                 flats[0].view(np.uint16), HALF_LUT, outs[i])
                else:
                    _gather1_f32(base_flat, fx, fy, fz, yz, z,
                                 flats[0].astype(np.float32, copy=False), outs[i])
                i += 1
        return outs

    w = _corner_weights(frac).astype(np.float32)
    flat = _corner_flat(base_flat, yz, z)
    for i, g in enumerate(grids):
        outs[i] = np.einsum("cn,cn->n", w, g.reshape(-1)[flat].astype(np.float32))
    return outs


def scatter_accumulate(base_local, frac, update_weights, updates, box_yz, box_z,
                       box_n):
    """Scatter contributions into dense per-box accumulators.

    Returns (acc_w, acc_wv, touched_local) where touched_local holds the
    local indices that received positive weight, in deterministic order.
    """
    acc_w = np.zeros(box_n)
    acc_wv = np.zeros(box_n)
    uw = np.ascontiguousarray(update_weights, dtype=np.float64)
    upd = np.ascontiguousarray(updates, dtype=np.float64)
    if HAS_NUMBA:
        touched = np.empty(min(8 * base_local.size, box_n), dtype=np.int64)
        fx = np.ascontiguousarray(frac[:, 0])
        fy = np.ascontiguousarray(frac[:, 1])
        fz = np.ascontiguousarray(frac[:, 2])
        count = _scatter8(base_local, fx, fy, fz, uw, upd, box_yz, box_z,
                          acc_w, acc_wv, touched)
        return acc_w, acc_wv, touched[:count]

    w = _corner_weights(frac)
    flat = _corner_flat(base_local, box_yz, box_z).reshape(-1)
    contrib_w = (w * uw[None, :]).reshape(-1)
    contrib_wv = (w * (uw * upd)[None, :]).reshape(-1)
    acc_w = np.bincount(flat, weights=contrib_w, minlength=box_n)
    acc_wv = np.bincount(flat, weights=contrib_wv, minlength=box_n)
    return acc_w, acc_wv, np.flatnonzero(acc_w > 0)


# largest dense reduction box for the label kernel; larger footprints use
# the sort-based compaction below
_DENSE_LABEL_CAP = 1 << 24


def label_winners(base_local, frac, scores, labels, rays, box_yz, box_z, box_n):
    """Reduce same-frame label contributions to one winner per voxel.

    Winner = highest score, ties to the lowest ray index; zero-score
    contributions are dropped. Returns (local_indices, labels, scores) of
    the winners in deterministic order.
    """
    if HAS_NUMBA and box_n <= _DENSE_LABEL_CAP:
        best_s = np.full(box_n, -1.0, dtype=np.float32)
        best_l = np.zeros(box_n, dtype=np.int64)
        best_r = np.zeros(box_n, dtype=np.int64)
        touched = np.empty(min(8 * base_local.size, box_n), dtype=np.int64)
        fx = np.ascontiguousarray(frac[:, 0])
        fy = np.ascontiguousarray(frac[:, 1])
        fz = np.ascontiguousarray(frac[:, 2])
        count = _scatter_label_max(
            base_local, fx, fy, fz,
            np.ascontiguousarray(scores, dtype=np.float32),
            np.ascontiguousarray(labels, dtype=np.int64),
            np.ascontiguousarray(rays, dtype=np.int64),
            box_yz, box_z, best_s, best_l, best_r, touched)
        idx = touched[:count]
        return idx, best_l[idx].astype(np.uint8), best_s[idx]

    corner_w = _corner_weights(frac)
    flat = _corner_flat(base_local, box_yz, box_z)
    take = (corner_w > 0) & (np.asarray(scores, dtype=np.float32)[None, :] > 0)
    if not np.any(take):
        return (np.empty(0, np.int64), np.empty(0, np.uint8),
                np.empty(0, np.float32))
    vox = flat[take]
    sample_of = np.broadcast_to(np.arange(base_local.size), take.shape)[take]
    s = np.asarray(scores, dtype=np.float32)[sample_of]
    order = np.lexsort((rays[sample_of], -s, vox))
    vox = vox[order]
    first = np.empty(vox.size, dtype=bool)
    first[0] = True
    np.not_equal(vox[1:], vox[:-1], out=first[1:])
    return (vox[first], np.asarray(labels, np.uint8)[sample_of][order][first],
            s[order][first])
