"""Numba kernels: tiled Gaussian rasterization (forward, backward, binning)
and the fused point-map alignment objective.

Determinism contract: splat passes parallelize over tiles, each tile owning a
disjoint pixel block (forward) or a disjoint slice of the pair-gradient
buffers (backward). All reductions across tiles and Gaussians run in fixed
ascending order in separate serial kernels, so results are bit-identical
regardless of thread count.
"""

import numpy as np
from numba import njit, prange

TILE_SIZE = 16
WEIGHT_CLIP = 0.99
SKIP_WEIGHT = 1e-4
MIN_TRANSMITTANCE = 1e-4
LOW_PASS = 0.3  # screen-space covariance dilation, px^2


# Slack added to footprint radii when binning and prechecking, so the cheap
# box tests can never disagree with the exact per-pixel weight-skip test.
RADIUS_SLACK = 0.5


@njit(cache=True)
def count_tiles(means2d, radii, width, height):
    """Number of tiles each Gaussian touches; 0 for culled Gaussians."""
    n = means2d.shape[0]
    counts = np.zeros(n, dtype=np.int64)
    ntx = (width + TILE_SIZE - 1) // TILE_SIZE
    nty = (height + TILE_SIZE - 1) // TILE_SIZE
    for i in range(n):
        r = radii[i]
        if r <= 0.0:
            continue
        r += RADIUS_SLACK
        x, y = means2d[i, 0], means2d[i, 1]
        if x + r < 0.0 or x - r > width - 1.0 or y + r < 0.0 or y - r > height - 1.0:
            continue
        tx0 = max(0, int(np.floor((x - r) / TILE_SIZE)))
        tx1 = min(ntx - 1, int(np.floor((x + r) / TILE_SIZE)))
        ty0 = max(0, int(np.floor((y - r) / TILE_SIZE)))
        ty1 = min(nty - 1, int(np.floor((y + r) / TILE_SIZE)))
        counts[i] = (tx1 - tx0 + 1) * (ty1 - ty0 + 1)
    return counts


@njit(cache=True)
def build_pairs(order, means2d, radii, width, height, tile_counts):
    """Expand depth-sorted Gaussians into per-tile contributor lists.

    Iterating Gaussians in global depth order while scattering keeps every
    tile's list depth-sorted without a second sort.

    Returns:
        pair_gauss: (P,) Gaussian index per (tile, contributor) slot.
        tile_starts, tile_ends: (T,) slot ranges per tile.
    """
    ntx = (width + TILE_SIZE - 1) // TILE_SIZE
    nty = (height + TILE_SIZE - 1) // TILE_SIZE
    n_tiles = ntx * nty
    per_tile = np.zeros(n_tiles, dtype=np.int64)
    for k in range(order.shape[0]):
        i = order[k]
        if tile_counts[i] == 0:
            continue
        r = radii[i] + RADIUS_SLACK
        x, y = means2d[i, 0], means2d[i, 1]
        tx0 = max(0, int(np.floor((x - r) / TILE_SIZE)))
        tx1 = min(ntx - 1, int(np.floor((x + r) / TILE_SIZE)))
        ty0 = max(0, int(np.floor((y - r) / TILE_SIZE)))
        ty1 = min(nty - 1, int(np.floor((y + r) / TILE_SIZE)))
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                per_tile[ty * ntx + tx] += 1
    tile_starts = np.zeros(n_tiles, dtype=np.int64)
    total = 0
    for t in range(n_tiles):
        tile_starts[t] = total
        total += per_tile[t]
    tile_ends = tile_starts + per_tile
    cursor = tile_starts.copy()
    pair_gauss = np.empty(total, dtype=np.int32)
    for k in range(order.shape[0]):
        i = order[k]
        if tile_counts[i] == 0:
            continue
        r = radii[i] + RADIUS_SLACK
        x, y = means2d[i, 0], means2d[i, 1]
        tx0 = max(0, int(np.floor((x - r) / TILE_SIZE)))
        tx1 = min(ntx - 1, int(np.floor((x + r) / TILE_SIZE)))
        ty0 = max(0, int(np.floor((y - r) / TILE_SIZE)))
        ty1 = min(nty - 1, int(np.floor((y + r) / TILE_SIZE)))
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                t = ty * ntx + tx
                pair_gauss[cursor[t]] = i
                cursor[t] += 1
    return pair_gauss, tile_starts, tile_ends


# Packed per-pair layout: one row per (tile, Gaussian) slot so the pixel
# loops stream contiguous memory, ordered by access phase (x-reject first,
# quadratic next, compositing last) and padded to 16 columns so a 64-byte
# aligned f32 row spans exactly one cache line. Columns:
# 0 mu_x, 1 radius+slack, 2 mu_y, 3 conic_a, 4 conic_b, 5 conic_c, 6 qmax,
# 7 alpha, 8..10 rgb, 11 depth, 12..15 unused.
PACK_COLS = 16


@njit(cache=True)
def pack_pairs(pair_gauss, mu, conic, alpha, qmax, radius, color, depth, out):
    """Gather per-Gaussian render data into the per-pair packed layout."""
    for k in range(pair_gauss.shape[0]):
        gi = pair_gauss[k]
        out[k, 0] = mu[gi, 0]
        out[k, 1] = radius[gi] + RADIUS_SLACK
        out[k, 2] = mu[gi, 1]
        out[k, 3] = conic[gi, 0]
        out[k, 4] = conic[gi, 1]
        out[k, 5] = conic[gi, 2]
        out[k, 6] = qmax[gi]
        out[k, 7] = alpha[gi]
        out[k, 8] = color[gi, 0]
        out[k, 9] = color[gi, 1]
        out[k, 10] = color[gi, 2]
        out[k, 11] = depth[gi]


@njit(cache=True, parallel=True, fastmath={"contract"})
def forward_splat(
    packed,
    tile_starts,
    tile_ends,
    width,
    height,
    stride,
    background,
    out_rgb,
    out_trans,
    out_depth,
    out_ncontrib,
    out_last,
):
    """Front-to-back alpha compositing over per-tile depth-sorted lists.

    Each pixel row scatters the pairs spanning it into per-pixel-column
    candidate lists (depth order is preserved because the tile list is
    walked in order), so the per-pixel loop touches only Gaussians whose
    footprint box contains the pixel. out_last records, per pixel, the
    exclusive column-list bound the loop reached before terminating; the
    backward pass rebuilds the identical lists and replays that range. The
    box and quadratic prechecks only reject visits whose weight sits below
    the skip threshold by a margin far wider than roundoff, so they never
    change which Gaussians composite. Pixels off the stride lattice are left
    untouched.
    """
    ntx = (width + TILE_SIZE - 1) // TILE_SIZE
    nty = (height + TILE_SIZE - 1) // TILE_SIZE
    for tile in prange(ntx * nty):
        ty = tile // ntx
        tx = tile - ty * ntx
        y0, y1 = ty * TILE_SIZE, min(height, (ty + 1) * TILE_SIZE)
        x0, x1 = tx * TILE_SIZE, min(width, (tx + 1) * TILE_SIZE)
        start, end = tile_starts[tile], tile_ends[tile]
        nlist = end - start
        ncols = x1 - x0
        colbuf = np.empty((ncols, max(nlist, 1)), dtype=np.int32)
        collen = np.zeros(ncols, dtype=np.int32)
        # Compact (mux, muy, r) copy; the binning scans stay in L1 instead
        # of streaming full packed rows once per pixel row.
        geo = np.empty((max(nlist, 1), 3), dtype=np.float64)
        for i in range(nlist):
            geo[i, 0] = packed[start + i, 0]
            geo[i, 1] = packed[start + i, 2]
            geo[i, 2] = packed[start + i, 1]
        for py in range(y0, y1):
            if py % stride != 0:
                continue
            fpy = float(py)
            for ci in range(ncols):
                collen[ci] = 0
            for i in range(nlist):
                dy = fpy - geo[i, 1]
                r = geo[i, 2]
                if dy > r or -dy > r:
                    continue
                mux = geo[i, 0]
                lo = int(np.ceil(mux - r))
                hi = int(np.floor(mux + r))
                if lo < x0:
                    lo = x0
                if hi >= x1:
                    hi = x1 - 1
                lo += (stride - lo % stride) % stride
                for px in range(lo, hi + 1, stride):
                    ci = px - x0
                    colbuf[ci, collen[ci]] = start + i
                    collen[ci] += 1
            for px in range(x0, x1):
                if px % stride != 0:
                    continue
                ci = px - x0
                clen = collen[ci]
                fpx = float(px)
                trans = 1.0
                acc_r = 0.0
                acc_g = 0.0
                acc_b = 0.0
                acc_d = 0.0
                ncontrib = 0
                last = clen
                for j in range(clen):
                    k = colbuf[ci, j]
                    dx = fpx - packed[k, 0]
                    dy = fpy - packed[k, 2]
                    q = (
                        packed[k, 3] * dx * dx
                        + 2.0 * packed[k, 4] * dx * dy
                        + packed[k, 5] * dy * dy
                    )
                    if q >= packed[k, 6]:
                        continue
                    w = packed[k, 7] * np.exp(-0.5 * q)
                    if w > WEIGHT_CLIP:
                        w = WEIGHT_CLIP
                    if w <= SKIP_WEIGHT:
                        continue
                    wt = w * trans
                    acc_r += wt * packed[k, 8]
                    acc_g += wt * packed[k, 9]
                    acc_b += wt * packed[k, 10]
                    acc_d += wt * packed[k, 11]
                    ncontrib += 1
                    trans *= 1.0 - w
                    if trans < MIN_TRANSMITTANCE:
                        last = j + 1
                        break
                out_rgb[py, px, 0] = acc_r + trans * background[0]
                out_rgb[py, px, 1] = acc_g + trans * background[1]
                out_rgb[py, px, 2] = acc_b + trans * background[2]
                out_trans[py, px] = trans
                out_depth[py, px] = acc_d
                out_ncontrib[py, px] = ncontrib
                out_last[py, px] = last


# Per-pair gradient layout, padded like the forward packing:
# 0 d_mu_x, 1 d_mu_y, 2 d_conic_a, 3 d_conic_b, 4 d_conic_c, 5 d_alpha,
# 6..8 d_rgb, 9..15 unused.
GRAD_COLS = 16


@njit(cache=True, parallel=True, fastmath={"contract"})
def backward_splat(
    packed,
    tile_starts,
    tile_ends,
    width,
    height,
    stride,
    background,
    final_trans,
    last_idx,
    dL_drgb,
    pair_grads,
):
    """Per-pair gradient accumulation, walking contributors back-to-front.

    Rebuilds each row's per-column candidate lists exactly as the forward
    pass did. Each tile writes only its own pair slots; the cross-Gaussian
    merge happens in merge_pair_grads to keep reductions ordered.
    """
    ntx = (width + TILE_SIZE - 1) // TILE_SIZE
    nty = (height + TILE_SIZE - 1) // TILE_SIZE
    for tile in prange(ntx * nty):
        ty = tile // ntx
        tx = tile - ty * ntx
        y0, y1 = ty * TILE_SIZE, min(height, (ty + 1) * TILE_SIZE)
        x0, x1 = tx * TILE_SIZE, min(width, (tx + 1) * TILE_SIZE)
        start = tile_starts[tile]
        end = tile_ends[tile]
        if end == start:
            continue
        nlist = end - start
        ncols = x1 - x0
        colbuf = np.empty((ncols, nlist), dtype=np.int32)
        collen = np.zeros(ncols, dtype=np.int32)
        geo = np.empty((nlist, 3), dtype=np.float64)
        for i in range(nlist):
            geo[i, 0] = packed[start + i, 0]
            geo[i, 1] = packed[start + i, 2]
            geo[i, 2] = packed[start + i, 1]
        for py in range(y0, y1):
            if py % stride != 0:
                continue
            fpy = float(py)
            for ci in range(ncols):
                collen[ci] = 0
            for i in range(nlist):
                dy = fpy - geo[i, 1]
                r = geo[i, 2]
                if dy > r or -dy > r:
                    continue
                mux = geo[i, 0]
                lo = int(np.ceil(mux - r))
                hi = int(np.floor(mux + r))
                if lo < x0:
                    lo = x0
                if hi >= x1:
                    hi = x1 - 1
                lo += (stride - lo % stride) % stride
                for px in range(lo, hi + 1, stride):
                    ci = px - x0
                    colbuf[ci, collen[ci]] = start + i
                    collen[ci] += 1
            for px in range(x0, x1):
                if px % stride != 0:
                    continue
                dl_r = dL_drgb[py, px, 0]
                dl_g = dL_drgb[py, px, 1]
                dl_b = dL_drgb[py, px, 2]
                if dl_r == 0.0 and dl_g == 0.0 and dl_b == 0.0:
                    continue
                ci = px - x0
                fpx = float(px)
                t_final = final_trans[py, px]
                bg_r = t_final * background[0]
                bg_g = t_final * background[1]
                bg_b = t_final * background[2]
                suf_r = 0.0
                suf_g = 0.0
                suf_b = 0.0
                t_behind = t_final
                for j in range(last_idx[py, px] - 1, -1, -1):
                    k = colbuf[ci, j]
                    dx = fpx - packed[k, 0]
                    dy = fpy - packed[k, 2]
                    ca = packed[k, 3]
                    cb = packed[k, 4]
                    cc = packed[k, 5]
                    q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                    if q >= packed[k, 6]:
                        continue
                    g = np.exp(-0.5 * q)
                    w_raw = packed[k, 7] * g
                    clipped = w_raw > WEIGHT_CLIP
                    w = WEIGHT_CLIP if clipped else w_raw
                    if w <= SKIP_WEIGHT:
                        continue
                    one_minus = 1.0 - w
                    t_i = t_behind / one_minus
                    wt = w * t_i
                    c_r = packed[k, 8]
                    c_g = packed[k, 9]
                    c_b = packed[k, 10]
                    pair_grads[k, 6] += dl_r * wt
                    pair_grads[k, 7] += dl_g * wt
                    pair_grads[k, 8] += dl_b * wt
                    dldw = (
                        dl_r * (t_i * c_r - (suf_r + bg_r) / one_minus)
                        + dl_g * (t_i * c_g - (suf_g + bg_g) / one_minus)
                        + dl_b * (t_i * c_b - (suf_b + bg_b) / one_minus)
                    )
                    if not clipped:
                        pair_grads[k, 5] += dldw * g
                        dldq = -0.5 * w_raw * dldw
                        pair_grads[k, 2] += dldq * dx * dx
                        pair_grads[k, 3] += dldq * 2.0 * dx * dy
                        pair_grads[k, 4] += dldq * dy * dy
                        pair_grads[k, 0] += dldq * -2.0 * (ca * dx + cb * dy)
                        pair_grads[k, 1] += dldq * -2.0 * (cb * dx + cc * dy)
                    suf_r += wt * c_r
                    suf_g += wt * c_g
                    suf_b += wt * c_b
                    t_behind = t_i


# Typed constants for the f32 splat kernels. Plain literals would promote
# every expression to f64, so each one is pinned to float32 here.
F32_ZERO = np.float32(0.0)
F32_ONE = np.float32(1.0)
F32_TWO = np.float32(2.0)
F32_NEG_HALF = np.float32(-0.5)
F32_WEIGHT_CLIP = np.float32(WEIGHT_CLIP)
F32_SKIP_WEIGHT = np.float32(SKIP_WEIGHT)
F32_MIN_TRANSMITTANCE = np.float32(MIN_TRANSMITTANCE)


@njit(cache=True, parallel=True, fastmath={"contract"})
def forward_splat32(
    packed,
    tile_starts,
    tile_ends,
    width,
    height,
    stride,
    background,
    out_rgb,
    out_trans,
    out_depth,
    out_ncontrib,
    out_last,
):
    """Single-precision twin of forward_splat.

    Same control flow; weights near the skip and clip thresholds may resolve
    differently than in f64, so this path trades bit-level agreement with the
    double-precision renderer for speed.
    """
    ntx = (width + TILE_SIZE - 1) // TILE_SIZE
    nty = (height + TILE_SIZE - 1) // TILE_SIZE
    for tile in prange(ntx * nty):
        ty = tile // ntx
        tx = tile - ty * ntx
        y0, y1 = ty * TILE_SIZE, min(height, (ty + 1) * TILE_SIZE)
        x0, x1 = tx * TILE_SIZE, min(width, (tx + 1) * TILE_SIZE)
        start, end = tile_starts[tile], tile_ends[tile]
        nlist = end - start
        ncols = x1 - x0
        colbuf = np.empty((ncols, max(nlist, 1)), dtype=np.int32)
        collen = np.zeros(ncols, dtype=np.int32)
        geo = np.empty((max(nlist, 1), 3), dtype=np.float32)
        for i in range(nlist):
            geo[i, 0] = packed[start + i, 0]
            geo[i, 1] = packed[start + i, 2]
            geo[i, 2] = packed[start + i, 1]
        for py in range(y0, y1):
            if py % stride != 0:
                continue
            fpy = np.float32(py)
            for ci in range(ncols):
                collen[ci] = 0
            for i in range(nlist):
                dy = fpy - geo[i, 1]
                r = geo[i, 2]
                if dy > r or -dy > r:
                    continue
                mux = geo[i, 0]
                lo = int(np.ceil(mux - r))
                hi = int(np.floor(mux + r))
                if lo < x0:
                    lo = x0
                if hi >= x1:
                    hi = x1 - 1
                lo += (stride - lo % stride) % stride
                for px in range(lo, hi + 1, stride):
                    ci = px - x0
                    colbuf[ci, collen[ci]] = start + i
                    collen[ci] += 1
            for px in range(x0, x1):
                if px % stride != 0:
                    continue
                ci = px - x0
                clen = collen[ci]
                fpx = np.float32(px)
                trans = F32_ONE
                acc_r = F32_ZERO
                acc_g = F32_ZERO
                acc_b = F32_ZERO
                acc_d = F32_ZERO
                ncontrib = 0
                last = clen
                for j in range(clen):
                    k = colbuf[ci, j]
                    dx = fpx - packed[k, 0]
                    dy = fpy - packed[k, 2]
                    q = (
                        packed[k, 3] * dx * dx
                        + F32_TWO * packed[k, 4] * dx * dy
                        + packed[k, 5] * dy * dy
                    )
                    if q >= packed[k, 6]:
                        continue
                    w = packed[k, 7] * np.exp(F32_NEG_HALF * q)
                    if w > F32_WEIGHT_CLIP:
                        w = F32_WEIGHT_CLIP
                    if w <= F32_SKIP_WEIGHT:
                        continue
                    wt = w * trans
                    acc_r += wt * packed[k, 8]
                    acc_g += wt * packed[k, 9]
                    acc_b += wt * packed[k, 10]
                    acc_d += wt * packed[k, 11]
                    ncontrib += 1
                    trans *= F32_ONE - w
                    if trans < F32_MIN_TRANSMITTANCE:
                        last = j + 1
                        break
                out_rgb[py, px, 0] = acc_r + trans * background[0]
                out_rgb[py, px, 1] = acc_g + trans * background[1]
                out_rgb[py, px, 2] = acc_b + trans * background[2]
                out_trans[py, px] = trans
                out_depth[py, px] = acc_d
                out_ncontrib[py, px] = ncontrib
                out_last[py, px] = last


@njit(cache=True, parallel=True, fastmath={"contract"})
def backward_splat32(
    packed,
    tile_starts,
    tile_ends,
    width,
    height,
    stride,
    background,
    final_trans,
    last_idx,
    dL_drgb,
    pair_grads,
):
    """Single-precision twin of backward_splat."""
    ntx = (width + TILE_SIZE - 1) // TILE_SIZE
    nty = (height + TILE_SIZE - 1) // TILE_SIZE
    for tile in prange(ntx * nty):
        ty = tile // ntx
        tx = tile - ty * ntx
        y0, y1 = ty * TILE_SIZE, min(height, (ty + 1) * TILE_SIZE)
        x0, x1 = tx * TILE_SIZE, min(width, (tx + 1) * TILE_SIZE)
        start = tile_starts[tile]
        end = tile_ends[tile]
        if end == start:
            continue
        nlist = end - start
        ncols = x1 - x0
        colbuf = np.empty((ncols, nlist), dtype=np.int32)
        collen = np.zeros(ncols, dtype=np.int32)
        geo = np.empty((nlist, 3), dtype=np.float32)
        for i in range(nlist):
            geo[i, 0] = packed[start + i, 0]
            geo[i, 1] = packed[start + i, 2]
            geo[i, 2] = packed[start + i, 1]
        for py in range(y0, y1):
            if py % stride != 0:
                continue
            fpy = np.float32(py)
            for ci in range(ncols):
                collen[ci] = 0
            for i in range(nlist):
                dy = fpy - geo[i, 1]
                r = geo[i, 2]
                if dy > r or -dy > r:
                    continue
                mux = geo[i, 0]
                lo = int(np.ceil(mux - r))
                hi = int(np.floor(mux + r))
                if lo < x0:
                    lo = x0
                if hi >= x1:
                    hi = x1 - 1
                lo += (stride - lo % stride) % stride
                for px in range(lo, hi + 1, stride):
                    ci = px - x0
                    colbuf[ci, collen[ci]] = start + i
                    collen[ci] += 1
            for px in range(x0, x1):
                if px % stride != 0:
                    continue
                dl_r = dL_drgb[py, px, 0]
                dl_g = dL_drgb[py, px, 1]
                dl_b = dL_drgb[py, px, 2]
                if dl_r == F32_ZERO and dl_g == F32_ZERO and dl_b == F32_ZERO:
                    continue
                ci = px - x0
                fpx = np.float32(px)
                t_final = final_trans[py, px]
                bg_r = t_final * background[0]
                bg_g = t_final * background[1]
                bg_b = t_final * background[2]
                suf_r = F32_ZERO
                suf_g = F32_ZERO
                suf_b = F32_ZERO
                t_behind = t_final
                for j in range(last_idx[py, px] - 1, -1, -1):
                    k = colbuf[ci, j]
                    dx = fpx - packed[k, 0]
                    dy = fpy - packed[k, 2]
                    ca = packed[k, 3]
                    cb = packed[k, 4]
                    cc = packed[k, 5]
                    q = ca * dx * dx + F32_TWO * cb * dx * dy + cc * dy * dy
                    if q >= packed[k, 6]:
                        continue
                    g = np.exp(F32_NEG_HALF * q)
                    w_raw = packed[k, 7] * g
                    clipped = w_raw > F32_WEIGHT_CLIP
                    w = F32_WEIGHT_CLIP if clipped else w_raw
                    if w <= F32_SKIP_WEIGHT:
                        continue
                    one_minus = F32_ONE - w
                    t_i = t_behind / one_minus
                    wt = w * t_i
                    c_r = packed[k, 8]
                    c_g = packed[k, 9]
                    c_b = packed[k, 10]
                    pair_grads[k, 6] += dl_r * wt
                    pair_grads[k, 7] += dl_g * wt
                    pair_grads[k, 8] += dl_b * wt
                    dldw = (
                        dl_r * (t_i * c_r - (suf_r + bg_r) / one_minus)
                        + dl_g * (t_i * c_g - (suf_g + bg_g) / one_minus)
                        + dl_b * (t_i * c_b - (suf_b + bg_b) / one_minus)
                    )
                    if not clipped:
                        pair_grads[k, 5] += dldw * g
                        dldq = F32_NEG_HALF * w_raw * dldw
                        pair_grads[k, 2] += dldq * dx * dx
                        pair_grads[k, 3] += dldq * F32_TWO * dx * dy
                        pair_grads[k, 4] += dldq * dy * dy
                        pair_grads[k, 0] += dldq * -F32_TWO * (ca * dx + cb * dy)
                        pair_grads[k, 1] += dldq * -F32_TWO * (cb * dx + cc * dy)
                    suf_r += wt * c_r
                    suf_g += wt * c_g
                    suf_b += wt * c_b
                    t_behind = t_i


@njit(cache=True)
def merge_pair_grads(
    pair_gauss,
    pair_grads,
    g_dmu,
    g_dconic,
    g_dalpha,
    g_dcolor,
):
    """Fold pair gradients into per-Gaussian buffers in ascending slot order."""
    for k in range(pair_gauss.shape[0]):
        gi = pair_gauss[k]
        g_dmu[gi, 0] += pair_grads[k, 0]
        g_dmu[gi, 1] += pair_grads[k, 1]
        g_dconic[gi, 0] += pair_grads[k, 2]
        g_dconic[gi, 1] += pair_grads[k, 3]
        g_dconic[gi, 2] += pair_grads[k, 4]
        g_dalpha[gi] += pair_grads[k, 5]
        g_dcolor[gi, 0] += pair_grads[k, 6]
        g_dcolor[gi, 1] += pair_grads[k, 7]
        g_dcolor[gi, 2] += pair_grads[k, 8]


@njit(cache=True)
def geometry_forward(
    positions,
    quats,
    log_scales,
    sh,
    opacity_logits,
    degree,
    W,
    twc,
    center,
    focal,
    cx,
    cy,
    z_near,
    width,
    height,
    out_pcam,
    out_mu,
    out_conic,
    out_alpha,
    out_color,
    out_radius,
    out_depth,
    out_basis,
    out_clamped,
):
    """Project every Gaussian: camera-frame mean, 2D mean, inverse screen
    covariance, footprint radius, opacity, and SH color with clamp state.

    The footprint radius max(3, sqrt(2 ln(alpha/skip))) * sigma_max guarantees
    every pixel outside the binned tiles would fail the weight-skip test, so
    tiling never changes the composited result.
    """
    n = positions.shape[0]
    for i in range(n):
        out_radius[i] = 0.0
        xw0 = positions[i, 0]
        xw1 = positions[i, 1]
        xw2 = positions[i, 2]
        p0 = W[0, 0] * xw0 + W[0, 1] * xw1 + W[0, 2] * xw2 + twc[0]
        p1 = W[1, 0] * xw0 + W[1, 1] * xw1 + W[1, 2] * xw2 + twc[1]
        p2 = W[2, 0] * xw0 + W[2, 1] * xw1 + W[2, 2] * xw2 + twc[2]
        out_pcam[i, 0] = p0
        out_pcam[i, 1] = p1
        out_pcam[i, 2] = p2
        out_depth[i] = p2
        if p2 <= z_near:
            continue
        lg = opacity_logits[i]
        if lg >= 0.0:
            alpha = 1.0 / (1.0 + np.exp(-lg))
        else:
            e = np.exp(lg)
            alpha = e / (1.0 + e)
        out_alpha[i] = alpha
        if alpha <= SKIP_WEIGHT:
            continue
        # Rotation from (normalized) quaternion.
        qw = quats[i, 0]
        qx = quats[i, 1]
        qy = quats[i, 2]
        qz = quats[i, 3]
        qn = np.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
        qw /= qn
        qx /= qn
        qy /= qn
        qz /= qn
        r00 = 1.0 - 2.0 * (qy * qy + qz * qz)
        r01 = 2.0 * (qx * qy - qw * qz)
        r02 = 2.0 * (qx * qz + qw * qy)
        r10 = 2.0 * (qx * qy + qw * qz)
        r11 = 1.0 - 2.0 * (qx * qx + qz * qz)
        r12 = 2.0 * (qy * qz - qw * qx)
        r20 = 2.0 * (qx * qz - qw * qy)
        r21 = 2.0 * (qy * qz + qw * qx)
        r22 = 1.0 - 2.0 * (qx * qx + qy * qy)
        s0 = np.exp(log_scales[i, 0])
        s1 = np.exp(log_scales[i, 1])
        s2 = np.exp(log_scales[i, 2])
        # Sigma_world = R diag(s^2) R^T.
        v00 = s0 * s0
        v11 = s1 * s1
        v22 = s2 * s2
        sw00 = r00 * r00 * v00 + r01 * r01 * v11 + r02 * r02 * v22
        sw01 = r00 * r10 * v00 + r01 * r11 * v11 + r02 * r12 * v22
        sw02 = r00 * r20 * v00 + r01 * r21 * v11 + r02 * r22 * v22
        sw11 = r10 * r10 * v00 + r11 * r11 * v11 + r12 * r12 * v22
        sw12 = r10 * r20 * v00 + r11 * r21 * v11 + r12 * r22 * v22
        sw22 = r20 * r20 * v00 + r21 * r21 * v11 + r22 * r22 * v22
        # Sigma_cam = W Sigma_world W^T.
        a00 = W[0, 0] * sw00 + W[0, 1] * sw01 + W[0, 2] * sw02
        a01 = W[0, 0] * sw01 + W[0, 1] * sw11 + W[0, 2] * sw12
        a02 = W[0, 0] * sw02 + W[0, 1] * sw12 + W[0, 2] * sw22
        a10 = W[1, 0] * sw00 + W[1, 1] * sw01 + W[1, 2] * sw02
        a11 = W[1, 0] * sw01 + W[1, 1] * sw11 + W[1, 2] * sw12
        a12 = W[1, 0] * sw02 + W[1, 1] * sw12 + W[1, 2] * sw22
        a20 = W[2, 0] * sw00 + W[2, 1] * sw01 + W[2, 2] * sw02
        a21 = W[2, 0] * sw01 + W[2, 1] * sw11 + W[2, 2] * sw12
        a22 = W[2, 0] * sw02 + W[2, 1] * sw12 + W[2, 2] * sw22
        sc00 = a00 * W[0, 0] + a01 * W[0, 1] + a02 * W[0, 2]
        sc01 = a00 * W[1, 0] + a01 * W[1, 1] + a02 * W[1, 2]
        sc02 = a00 * W[2, 0] + a01 * W[2, 1] + a02 * W[2, 2]
        sc11 = a10 * W[1, 0] + a11 * W[1, 1] + a12 * W[1, 2]
        sc12 = a10 * W[2, 0] + a11 * W[2, 1] + a12 * W[2, 2]
        sc22 = a20 * W[2, 0] + a21 * W[2, 1] + a22 * W[2, 2]
        # EWA Jacobian rows: (f/z, 0, -f x/z^2), (0, f/z, -f y/z^2).
        iz = 1.0 / p2
        iz2 = iz * iz
        j00 = focal * iz
        j02 = -focal * p0 * iz2
        j11 = focal * iz
        j12 = -focal * p1 * iz2
        # Sigma_2D = J Sigma_cam J^T + LOW_PASS I.
        t00 = j00 * sc00 + j02 * sc02
        t01 = j00 * sc01 + j02 * sc12
        t02 = j00 * sc02 + j02 * sc22
        t10 = j11 * sc01 + j12 * sc02
        t11 = j11 * sc11 + j12 * sc12
        t12 = j11 * sc12 + j12 * sc22
        ca = t00 * j00 + t02 * j02 + LOW_PASS
        cb = t10 * j00 + t12 * j02
        cc = t11 * j11 + t12 * j12 + LOW_PASS
        det = ca * cc - cb * cb
        if det <= 0.0:
            continue
        idet = 1.0 / det
        out_conic[i, 0] = cc * idet
        out_conic[i, 1] = -cb * idet
        out_conic[i, 2] = ca * idet
        mid = 0.5 * (ca + cc)
        eig = mid + np.sqrt(max(0.25 * (ca - cc) * (ca - cc) + cb * cb, 0.0))
        sigma_max = np.sqrt(eig)
        factor = np.sqrt(2.0 * np.log(alpha / SKIP_WEIGHT))
        if factor < 3.0:
            factor = 3.0
        radius = factor * sigma_max
        mx = cx + focal * p0 * iz
        my = cy + focal * p1 * iz
        out_mu[i, 0] = mx
        out_mu[i, 1] = my
        if mx + radius < 0.0 or mx - radius > width - 1.0:
            continue
        if my + radius < 0.0 or my - radius > height - 1.0:
            continue
        out_radius[i] = radius
        # View direction and SH color.
        u0 = xw0 - center[0]
        u1 = xw1 - center[1]
        u2 = xw2 - center[2]
        rn = np.sqrt(u0 * u0 + u1 * u1 + u2 * u2)
        dx = u0 / rn
        dy = u1 / rn
        dz = u2 / rn
        xx = dx * dx
        yy = dy * dy
        zz = dz * dz
        out_basis[i, 0] = 0.28209479177387814
        if degree >= 1:
            out_basis[i, 1] = -0.4886025119029199 * dy
            out_basis[i, 2] = 0.4886025119029199 * dz
            out_basis[i, 3] = -0.4886025119029199 * dx
        if degree >= 2:
            out_basis[i, 4] = 1.0925484305920792 * dx * dy
            out_basis[i, 5] = -1.0925484305920792 * dy * dz
            out_basis[i, 6] = 0.31539156525252005 * (2.0 * zz - xx - yy)
            out_basis[i, 7] = -1.0925484305920792 * dx * dz
            out_basis[i, 8] = 0.5462742152960396 * (xx - yy)
        if degree >= 3:
            out_basis[i, 9] = -0.5900435899266435 * dy * (3.0 * xx - yy)
            out_basis[i, 10] = 2.890611442640554 * dx * dy * dz
            out_basis[i, 11] = -0.4570457994644658 * dy * (4.0 * zz - xx - yy)
            out_basis[i, 12] = 0.3731763325901154 * dz * (2.0 * zz - 3.0 * xx - 3.0 * yy)
            out_basis[i, 13] = -0.4570457994644658 * dx * (4.0 * zz - xx - yy)
            out_basis[i, 14] = 1.445305721320277 * dz * (xx - yy)
            out_basis[i, 15] = -0.5900435899266435 * dx * (xx - 3.0 * yy)
        nb = (degree + 1) * (degree + 1)
        for ch in range(3):
            val = 0.5
            for b in range(nb):
                val += out_basis[i, b] * sh[i, b, ch]
            if val <= 0.0:
                out_color[i, ch] = 0.0
                out_clamped[i, ch] = 1
            elif val >= 1.0:
                out_color[i, ch] = 1.0
                out_clamped[i, ch] = 1
            else:
                out_color[i, ch] = val
                out_clamped[i, ch] = 0


@njit(cache=True)
def geometry_backward(
    positions,
    quats,
    log_scales,
    sh,
    degree,
    W,
    twc,
    center,
    focal,
    pcam,
    conic,
    alpha,
    basis,
    clamped,
    radius,
    g_dmu,
    g_dconic,
    g_dalpha,
    g_dcolor,
    d_pos,
    d_sh,
    d_logit,
    d_quat,
    d_logscale,
    g_pose,
):
    """Chain per-Gaussian screen-space gradients back to Gaussian parameters,
    the camera pose twist (translation, rotation), and the focal length.

    g_pose layout: [v0 v1 v2 w0 w1 w2 focal]. Twists act as left-multiplied
    local updates on the camera-to-world transform. Gaussians with a zero
    footprint or all-zero incoming gradients are skipped, so culled and
    non-contributing Gaussians get exactly zero gradients.
    """
    n = positions.shape[0]
    nb = (degree + 1) * (degree + 1)
    sigw = np.zeros((3, 3), dtype=np.float64)
    sigc = np.zeros((3, 3), dtype=np.float64)
    rm = np.zeros((3, 3), dtype=np.float64)
    dsc = np.zeros((3, 3), dtype=np.float64)
    dsw = np.zeros((3, 3), dtype=np.float64)
    tmp = np.zeros((3, 3), dtype=np.float64)
    dwm = np.zeros((3, 3), dtype=np.float64)
    drm = np.zeros((3, 3), dtype=np.float64)
    for i in range(n):
        if radius[i] <= 0.0:
            continue
        gmx = g_dmu[i, 0]
        gmy = g_dmu[i, 1]
        ga = g_dconic[i, 0]
        gb = g_dconic[i, 1]
        gcc = g_dconic[i, 2]
        gal = g_dalpha[i]
        gq0 = g_dcolor[i, 0]
        gq1 = g_dcolor[i, 1]
        gq2 = g_dcolor[i, 2]
        if (
            gmx == 0.0
            and gmy == 0.0
            and ga == 0.0
            and gb == 0.0
            and gcc == 0.0
            and gal == 0.0
            and gq0 == 0.0
            and gq1 == 0.0
            and gq2 == 0.0
        ):
            continue
        # Opacity: w = sigmoid(logit).
        al = alpha[i]
        d_logit[i] = gal * al * (1.0 - al)
        # Recompute rotation from the raw quaternion.
        qw = quats[i, 0]
        qx = quats[i, 1]
        qy = quats[i, 2]
        qz = quats[i, 3]
        qn = np.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
        uw = qw / qn
        ux = qx / qn
        uy = qy / qn
        uz = qz / qn
        rm[0, 0] = 1.0 - 2.0 * (uy * uy + uz * uz)
        rm[0, 1] = 2.0 * (ux * uy - uw * uz)
        rm[0, 2] = 2.0 * (ux * uz + uw * uy)
        rm[1, 0] = 2.0 * (ux * uy + uw * uz)
        rm[1, 1] = 1.0 - 2.0 * (ux * ux + uz * uz)
        rm[1, 2] = 2.0 * (uy * uz - uw * ux)
        rm[2, 0] = 2.0 * (ux * uz - uw * uy)
        rm[2, 1] = 2.0 * (uy * uz + uw * ux)
        rm[2, 2] = 1.0 - 2.0 * (ux * ux + uy * uy)
        s0 = np.exp(log_scales[i, 0])
        s1 = np.exp(log_scales[i, 1])
        s2 = np.exp(log_scales[i, 2])
        v0 = s0 * s0
        v1 = s1 * s1
        v2 = s2 * s2
        for a_ in range(3):
            for b_ in range(3):
                sigw[a_, b_] = (
                    rm[a_, 0] * rm[b_, 0] * v0
                    + rm[a_, 1] * rm[b_, 1] * v1
                    + rm[a_, 2] * rm[b_, 2] * v2
                )
        # Sigma_cam = W Sigma_world W^T.
        for a_ in range(3):
            for b_ in range(3):
                acc = 0.0
                for k_ in range(3):
                    acc += W[a_, k_] * sigw[k_, b_]
                tmp[a_, b_] = acc
        for a_ in range(3):
            for b_ in range(3):
                acc = 0.0
                for k_ in range(3):
                    acc += tmp[a_, k_] * W[b_, k_]
                sigc[a_, b_] = acc
        p0 = pcam[i, 0]
        p1 = pcam[i, 1]
        p2 = pcam[i, 2]
        iz = 1.0 / p2
        iz2 = iz * iz
        j00 = focal * iz
        j02 = -focal * p0 * iz2
        j11 = focal * iz
        j12 = -focal * p1 * iz2
        # T = J Sigma_cam, rows of the projected covariance product.
        t00 = j00 * sigc[0, 0] + j02 * sigc[2, 0]
        t01 = j00 * sigc[0, 1] + j02 * sigc[2, 1]
        t02 = j00 * sigc[0, 2] + j02 * sigc[2, 2]
        t10 = j11 * sigc[1, 0] + j12 * sigc[2, 0]
        t11 = j11 * sigc[1, 1] + j12 * sigc[2, 1]
        t12 = j11 * sigc[1, 2] + j12 * sigc[2, 2]
        # Conic gradient -> screen covariance gradient: dSigma2 = -A G A.
        a0 = conic[i, 0]
        a1 = conic[i, 1]
        a2 = conic[i, 2]
        gb2 = 0.5 * gb
        ag00 = a0 * ga + a1 * gb2
        ag01 = a0 * gb2 + a1 * gcc
        ag10 = a1 * ga + a2 * gb2
        ag11 = a1 * gb2 + a2 * gcc
        d2_00 = -(ag00 * a0 + ag01 * a1)
        d2_01m = -(ag00 * a1 + ag01 * a2)
        d2_10m = -(ag10 * a0 + ag11 * a1)
        d2_11 = -(ag10 * a1 + ag11 * a2)
        d2_01 = 0.5 * (d2_01m + d2_10m)
        # dJ = 2 dSigma2 (J Sigma_cam); structural zeros of J never propagate.
        dj00 = 2.0 * (d2_00 * t00 + d2_01 * t10)
        dj02 = 2.0 * (d2_00 * t02 + d2_01 * t12)
        dj11 = 2.0 * (d2_01 * t01 + d2_11 * t11)
        dj12 = 2.0 * (d2_01 * t02 + d2_11 * t12)
        # dSigma_cam = J^T dSigma2 J.
        dsc[0, 0] = j00 * j00 * d2_00
        dsc[0, 1] = j00 * j11 * d2_01
        dsc[0, 2] = j00 * (d2_00 * j02 + d2_01 * j12)
        dsc[1, 0] = dsc[0, 1]
        dsc[1, 1] = j11 * j11 * d2_11
        dsc[1, 2] = j11 * (d2_01 * j02 + d2_11 * j12)
        dsc[2, 0] = dsc[0, 2]
        dsc[2, 1] = dsc[1, 2]
        dsc[2, 2] = j02 * (d2_00 * j02 + d2_01 * j12) + j12 * (
            d2_01 * j02 + d2_11 * j12
        )
        # dSigma_world = W^T dSigma_cam W; dW = 2 dSigma_cam W Sigma_world.
        for a_ in range(3):
            for b_ in range(3):
                acc = 0.0
                for k_ in range(3):
                    acc += W[k_, a_] * dsc[k_, b_]
                tmp[a_, b_] = acc
        for a_ in range(3):
            for b_ in range(3):
                acc = 0.0
                for k_ in range(3):
                    acc += tmp[a_, k_] * W[k_, b_]
                dsw[a_, b_] = acc
        for a_ in range(3):
            for b_ in range(3):
                acc = 0.0
                for k_ in range(3):
                    acc += dsc[a_, k_] * W[k_, b_]
                tmp[a_, b_] = acc
        for a_ in range(3):
            for b_ in range(3):
                acc = 0.0
                for k_ in range(3):
                    acc += tmp[a_, k_] * sigw[k_, b_]
                dwm[a_, b_] = 2.0 * acc
        # Scale gradient: dlog_s_k = 2 s_k^2 (R^T dSigma_world R)_kk.
        for k_ in range(3):
            acc = 0.0
            for a_ in range(3):
                for b_ in range(3):
                    acc += rm[a_, k_] * dsw[a_, b_] * rm[b_, k_]
            if k_ == 0:
                d_logscale[i, 0] = 2.0 * v0 * acc
            elif k_ == 1:
                d_logscale[i, 1] = 2.0 * v1 * acc
            else:
                d_logscale[i, 2] = 2.0 * v2 * acc
        # Rotation gradient: dR = 2 dSigma_world R diag(s^2).
        for a_ in range(3):
            drm[a_, 0] = 2.0 * v0 * (
                dsw[a_, 0] * rm[0, 0] + dsw[a_, 1] * rm[1, 0] + dsw[a_, 2] * rm[2, 0]
            )
            drm[a_, 1] = 2.0 * v1 * (
                dsw[a_, 0] * rm[0, 1] + dsw[a_, 1] * rm[1, 1] + dsw[a_, 2] * rm[2, 1]
            )
            drm[a_, 2] = 2.0 * v2 * (
                dsw[a_, 0] * rm[0, 2] + dsw[a_, 1] * rm[1, 2] + dsw[a_, 2] * rm[2, 2]
            )
        # dR -> unit quaternion, then through the normalization.
        duw = 2.0 * (
            -drm[0, 1] * uz
            + drm[0, 2] * uy
            + drm[1, 0] * uz
            - drm[1, 2] * ux
            - drm[2, 0] * uy
            + drm[2, 1] * ux
        )
        dux = 2.0 * (
            drm[0, 1] * uy
            + drm[0, 2] * uz
            + drm[1, 0] * uy
            - 2.0 * drm[1, 1] * ux
            - drm[1, 2] * uw
            + drm[2, 0] * uz
            + drm[2, 1] * uw
            - 2.0 * drm[2, 2] * ux
        )
        duy = 2.0 * (
            -2.0 * drm[0, 0] * uy
            + drm[0, 1] * ux
            + drm[0, 2] * uw
            + drm[1, 0] * ux
            + drm[1, 2] * uz
            - drm[2, 0] * uw
            + drm[2, 1] * uz
            - 2.0 * drm[2, 2] * uy
        )
        duz = 2.0 * (
            -2.0 * drm[0, 0] * uz
            - drm[0, 1] * uw
            + drm[0, 2] * ux
            + drm[1, 0] * uw
            - 2.0 * drm[1, 1] * uz
            + drm[1, 2] * uy
            + drm[2, 0] * ux
            + drm[2, 1] * uy
        )
        dot_uq = duw * uw + dux * ux + duy * uy + duz * uz
        d_quat[i, 0] = (duw - uw * dot_uq) / qn
        d_quat[i, 1] = (dux - ux * dot_uq) / qn
        d_quat[i, 2] = (duy - uy * dot_uq) / qn
        d_quat[i, 3] = (duz - uz * dot_uq) / qn
        # 2D mean and Jacobian chains into the camera-frame point and focal.
        dp0 = gmx * focal * iz
        dp1 = gmy * focal * iz
        dp2 = -(gmx * p0 + gmy * p1) * focal * iz2
        gfoc = (gmx * p0 + gmy * p1) * iz
        dp0 += dj02 * (-focal * iz2)
        dp1 += dj12 * (-focal * iz2)
        dp2 += -focal * iz2 * (dj00 + dj11) + 2.0 * focal * iz2 * iz * (
            p0 * dj02 + p1 * dj12
        )
        gfoc += iz * (dj00 + dj11) - iz2 * (p0 * dj02 + p1 * dj12)
        # SH color chain: coefficients plus the view-direction term.
        ddx = 0.0
        ddy = 0.0
        ddz = 0.0
        u0 = positions[i, 0] - center[0]
        u1 = positions[i, 1] - center[1]
        u2 = positions[i, 2] - center[2]
        rn = np.sqrt(u0 * u0 + u1 * u1 + u2 * u2)
        dx = u0 / rn
        dy = u1 / rn
        dz = u2 / rn
        xx = dx * dx
        yy = dy * dy
        zz = dz * dz
        for ch in range(3):
            if clamped[i, ch] != 0:
                continue
            dval = g_dcolor[i, ch]
            if dval == 0.0:
                continue
            for b_ in range(nb):
                d_sh[i, b_, ch] = basis[i, b_] * dval
            if degree >= 1:
                c1 = 0.4886025119029199
                ddy += dval * (-c1) * sh[i, 1, ch]
                ddz += dval * c1 * sh[i, 2, ch]
                ddx += dval * (-c1) * sh[i, 3, ch]
            if degree >= 2:
                c2a = 1.0925484305920792
                c2c = 0.31539156525252005
                c2e = 0.5462742152960396
                ddx += dval * (c2a * dy) * sh[i, 4, ch]
                ddy += dval * (c2a * dx) * sh[i, 4, ch]
                ddy += dval * (-c2a * dz) * sh[i, 5, ch]
                ddz += dval * (-c2a * dy) * sh[i, 5, ch]
                ddx += dval * (-2.0 * c2c * dx) * sh[i, 6, ch]
                ddy += dval * (-2.0 * c2c * dy) * sh[i, 6, ch]
                ddz += dval * (4.0 * c2c * dz) * sh[i, 6, ch]
                ddx += dval * (-c2a * dz) * sh[i, 7, ch]
                ddz += dval * (-c2a * dx) * sh[i, 7, ch]
                ddx += dval * (2.0 * c2e * dx) * sh[i, 8, ch]
                ddy += dval * (-2.0 * c2e * dy) * sh[i, 8, ch]
            if degree >= 3:
                c3a = 0.5900435899266435
                c3b = 2.890611442640554
                c3c = 0.4570457994644658
                c3d = 0.3731763325901154
                c3e = 1.445305721320277
                ddx += dval * (-6.0 * c3a * dx * dy) * sh[i, 9, ch]
                ddy += dval * (-3.0 * c3a * (xx - yy)) * sh[i, 9, ch]
                ddx += dval * (c3b * dy * dz) * sh[i, 10, ch]
                ddy += dval * (c3b * dx * dz) * sh[i, 10, ch]
                ddz += dval * (c3b * dx * dy) * sh[i, 10, ch]
                ddx += dval * (2.0 * c3c * dx * dy) * sh[i, 11, ch]
                ddy += dval * (-c3c * (4.0 * zz - xx - 3.0 * yy)) * sh[i, 11, ch]
                ddz += dval * (-8.0 * c3c * dy * dz) * sh[i, 11, ch]
                ddx += dval * (-6.0 * c3d * dx * dz) * sh[i, 12, ch]
                ddy += dval * (-6.0 * c3d * dy * dz) * sh[i, 12, ch]
                ddz += dval * (c3d * (6.0 * zz - 3.0 * xx - 3.0 * yy)) * sh[i, 12, ch]
                ddx += dval * (-c3c * (4.0 * zz - 3.0 * xx - yy)) * sh[i, 13, ch]
                ddy += dval * (2.0 * c3c * dx * dy) * sh[i, 13, ch]
                ddz += dval * (-8.0 * c3c * dx * dz) * sh[i, 13, ch]
                ddx += dval * (2.0 * c3e * dx * dz) * sh[i, 14, ch]
                ddy += dval * (-2.0 * c3e * dy * dz) * sh[i, 14, ch]
                ddz += dval * (c3e * (xx - yy)) * sh[i, 14, ch]
                ddx += dval * (-3.0 * c3a * (xx - yy)) * sh[i, 15, ch]
                ddy += dval * (6.0 * c3a * dx * dy) * sh[i, 15, ch]
        # Normalized-direction chain: du = (ddir - d (d . ddir)) / |u|.
        ddot = ddx * dx + ddy * dy + ddz * dz
        du0 = (ddx - dx * ddot) / rn
        du1 = (ddy - dy * ddot) / rn
        du2 = (ddz - dz * ddot) / rn
        # World-position gradient: projection chain plus view-direction chain.
        wdp0 = W[0, 0] * dp0 + W[1, 0] * dp1 + W[2, 0] * dp2
        wdp1 = W[0, 1] * dp0 + W[1, 1] * dp1 + W[2, 1] * dp2
        wdp2 = W[0, 2] * dp0 + W[1, 2] * dp1 + W[2, 2] * dp2
        d_pos[i, 0] = wdp0 + du0
        d_pos[i, 1] = wdp1 + du1
        d_pos[i, 2] = wdp2 + du2
        # Pose twist: translation part.
        g_pose[0] += -wdp0 - du0
        g_pose[1] += -wdp1 - du1
        g_pose[2] += -wdp2 - du2
        # Rotation part from the point chain: cross(W^T dp, x_world).
        xw0 = positions[i, 0]
        xw1 = positions[i, 1]
        xw2 = positions[i, 2]
        g_pose[3] += wdp1 * xw2 - wdp2 * xw1
        g_pose[4] += wdp2 * xw0 - wdp0 * xw2
        g_pose[5] += wdp0 * xw1 - wdp1 * xw0
        # Rotation part from the covariance chain: M = W^T dW.
        m01 = (
            W[0, 0] * dwm[0, 1]
            + W[1, 0] * dwm[1, 1]
            + W[2, 0] * dwm[2, 1]
        )
        m02 = (
            W[0, 0] * dwm[0, 2]
            + W[1, 0] * dwm[1, 2]
            + W[2, 0] * dwm[2, 2]
        )
        m10 = (
            W[0, 1] * dwm[0, 0]
            + W[1, 1] * dwm[1, 0]
            + W[2, 1] * dwm[2, 0]
        )
        m12 = (
            W[0, 1] * dwm[0, 2]
            + W[1, 1] * dwm[1, 2]
            + W[2, 1] * dwm[2, 2]
        )
        m20 = (
            W[0, 2] * dwm[0, 0]
            + W[1, 2] * dwm[1, 0]
            + W[2, 2] * dwm[2, 0]
        )
        m21 = (
            W[0, 2] * dwm[0, 1]
            + W[1, 2] * dwm[1, 1]
            + W[2, 2] * dwm[2, 1]
        )
        g_pose[3] += m12 - m21
        g_pose[4] += m20 - m02
        g_pose[5] += m01 - m10
        # Rotation part from the SH view-direction chain: cross(t, dcenter).
        g_pose[3] += center[1] * (-du2) - center[2] * (-du1)
        g_pose[4] += center[2] * (-du0) - center[0] * (-du2)
        g_pose[5] += center[0] * (-du1) - center[1] * (-du0)
        g_pose[6] += gfoc


@njit(cache=True)
def align_side_accumulate(
    qmap,
    conf,
    rays,
    depths,
    Rv,
    cv,
    Re,
    te,
    sigma,
    g_depth,
    g_view,
    g_edge,
):
    """One edge-side of the global alignment objective.

    Accumulates the unnormalized weighted squared residual
    sum_i conf_i |Rv (d_i ray_i) + cv - sigma (Re q_i + te)|^2 and its
    gradients with respect to log-depths, the view pose twist, the edge pose
    twist, and log sigma. g_edge layout: [v0 v1 v2 w0 w1 w2 logsigma].
    Returns the loss sum.
    """
    m = qmap.shape[0]
    loss = 0.0
    for i in range(m):
        d = depths[i]
        l0 = d * rays[i, 0]
        l1 = d * rays[i, 1]
        l2 = d * rays[i, 2]
        p0 = Rv[0, 0] * l0 + Rv[0, 1] * l1 + Rv[0, 2] * l2 + cv[0]
        p1 = Rv[1, 0] * l0 + Rv[1, 1] * l1 + Rv[1, 2] * l2 + cv[1]
        p2 = Rv[2, 0] * l0 + Rv[2, 1] * l1 + Rv[2, 2] * l2 + cv[2]
        z0 = Re[0, 0] * qmap[i, 0] + Re[0, 1] * qmap[i, 1] + Re[0, 2] * qmap[i, 2] + te[0]
        z1 = Re[1, 0] * qmap[i, 0] + Re[1, 1] * qmap[i, 1] + Re[1, 2] * qmap[i, 2] + te[1]
        z2 = Re[2, 0] * qmap[i, 0] + Re[2, 1] * qmap[i, 1] + Re[2, 2] * qmap[i, 2] + te[2]
        y0 = sigma * z0
        y1 = sigma * z1
        y2 = sigma * z2
        r0 = p0 - y0
        r1 = p1 - y1
        r2 = p2 - y2
        o = conf[i]
        loss += o * (r0 * r0 + r1 * r1 + r2 * r2)
        gr0 = 2.0 * o * r0
        gr1 = 2.0 * o * r1
        gr2 = 2.0 * o * r2
        # Log-depth chain: dP/dd = Rv ray, then times d.
        rd0 = Rv[0, 0] * rays[i, 0] + Rv[0, 1] * rays[i, 1] + Rv[0, 2] * rays[i, 2]
        rd1 = Rv[1, 0] * rays[i, 0] + Rv[1, 1] * rays[i, 1] + Rv[1, 2] * rays[i, 2]
        rd2 = Rv[2, 0] * rays[i, 0] + Rv[2, 1] * rays[i, 1] + Rv[2, 2] * rays[i, 2]
        g_depth[i] += (rd0 * gr0 + rd1 * gr1 + rd2 * gr2) * d
        # View pose twist (left-multiplied local update).
        g_view[0] += gr0
        g_view[1] += gr1
        g_view[2] += gr2
        g_view[3] += p1 * gr2 - p2 * gr1
        g_view[4] += p2 * gr0 - p0 * gr2
        g_view[5] += p0 * gr1 - p1 * gr0
        # Edge similarity transform.
        g_edge[0] -= sigma * gr0
        g_edge[1] -= sigma * gr1
        g_edge[2] -= sigma * gr2
        g_edge[3] -= sigma * (z1 * gr2 - z2 * gr1)
        g_edge[4] -= sigma * (z2 * gr0 - z0 * gr2)
        g_edge[5] -= sigma * (z0 * gr1 - z1 * gr0)
        g_edge[6] -= y0 * gr0 + y1 * gr1 + y2 * gr2
    return loss
