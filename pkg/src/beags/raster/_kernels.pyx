# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled compositing kernels.

Same contract as :mod:`beags.raster._fallback`. Hits are found in one pass
over every surfel's screen box, regrouped by pixel, and each pixel then
pops its hits from a (depth, surfel index) heap until transmittance runs
out. ``hit_index[offsets[p] + j]`` is the j-th composited hit of pixel p
for ``j < n_used[p]``. Gradient sums follow a fixed (pixel, depth)
order, so results do not depend on ``num_threads``.
"""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport exp, fabs
from libc.stdlib cimport malloc, free

cnp.import_array()

cdef double NEAR = 1e-4
cdef double CUT2 = 9.0
cdef double PAR_EPS = 1e-9
cdef double T_MIN = 1e-4
cdef int NG = 18  # p(3) tu(3) tv(3) n(3) lsu lsv opa color(3)

cdef enum:
    PKW = 13  # packed surfel: n(3), (p-o).n, o-p(3), tu/su(3), tv/sv(3)


cdef inline int _intersect(const double* d, const double* sp,
                           double* t_out, double* u_out, double* v_out, double* g_out) noexcept nogil:
    cdef double dn = d[0] * sp[0] + d[1] * sp[1] + d[2] * sp[2]
    if fabs(dn) < PAR_EPS:
        return 0
    cdef double t = sp[3] / dn
    if t <= NEAR:
        return 0
    cdef double r0 = sp[4] + t * d[0]
    cdef double r1 = sp[5] + t * d[1]
    cdef double r2 = sp[6] + t * d[2]
    cdef double U = r0 * sp[7] + r1 * sp[8] + r2 * sp[9]
    cdef double V = r0 * sp[10] + r1 * sp[11] + r2 * sp[12]
    cdef double rr = U * U + V * V
    if rr > CUT2:
        return 0
    t_out[0] = t
    u_out[0] = U
    v_out[0] = V
    g_out[0] = exp(-0.5 * rr)
    return 1


cdef inline bint _before(int a, int b, const double* kt, const int* kid) noexcept nogil:
    return kt[a] < kt[b] or (kt[a] == kt[b] and kid[a] < kid[b])


cdef inline void _sift(int* heap, Py_ssize_t i, Py_ssize_t size,
                       const double* kt, const int* kid) noexcept nogil:
    cdef Py_ssize_t l, r, m
    cdef int tmp
    while True:
        l = 2 * i + 1
        r = l + 1
        m = i
        if l < size and _before(heap[l], heap[m], kt, kid):
            m = l
        if r < size and _before(heap[r], heap[m], kt, kid):
            m = r
        if m == i:
            return
        tmp = heap[i]
        heap[i] = heap[m]
        heap[m] = tmp
        i = m


def forward(double[::1] origin, const double[:, ::1] dirs,
            double[:, ::1] p, double[:, ::1] tu, double[:, ::1] tv, double[:, ::1] n,
            double[::1] su, double[::1] sv, double[::1] opa, double[:, ::1] color,
            int[::1] cls, int[:, ::1] bbox, int[::1] sup,
            int width, int height, int n_classes, int num_threads=1):
    cdef Py_ssize_t npix = <Py_ssize_t>width * height
    cdef Py_ssize_t N = p.shape[0]
    cdef Py_ssize_t s, x, y, pix, k, j, m, start, end, M, C
    cdef double o[3]
    cdef double t, U, V, g
    o[0] = origin[0]; o[1] = origin[1]; o[2] = origin[2]

    # capacity: every bbox pixel of every surfel
    C = 0
    for s in range(N):
        if bbox[s, 0] <= bbox[s, 1] and bbox[s, 2] <= bbox[s, 3]:
            C += (bbox[s, 1] - bbox[s, 0] + 1) * (bbox[s, 3] - bbox[s, 2] + 1)
    hpix_np = np.empty(C, dtype=np.int32)
    hid_np = np.empty(C, dtype=np.int32)
    ht_np = np.empty(C, dtype=np.float64)
    cdef int[::1] hpix = hpix_np
    cdef int[::1] hid = hid_np
    cdef double[::1] ht = ht_np
    counts_np = np.zeros(npix + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] counts = counts_np

    pk_np = np.empty((N, PKW), dtype=np.float64)
    cdef double[:, ::1] pk = pk_np
    for s in range(N):
        pk[s, 0] = n[s, 0]; pk[s, 1] = n[s, 1]; pk[s, 2] = n[s, 2]
        pk[s, 3] = (p[s, 0] - o[0]) * n[s, 0] + (p[s, 1] - o[1]) * n[s, 1] + (p[s, 2] - o[2]) * n[s, 2]
        pk[s, 4] = o[0] - p[s, 0]; pk[s, 5] = o[1] - p[s, 1]; pk[s, 6] = o[2] - p[s, 2]
        pk[s, 7] = tu[s, 0] / su[s]; pk[s, 8] = tu[s, 1] / su[s]; pk[s, 9] = tu[s, 2] / su[s]
        pk[s, 10] = tv[s, 0] / sv[s]; pk[s, 11] = tv[s, 1] / sv[s]; pk[s, 12] = tv[s, 2] / sv[s]
    cdef const double* sp
    cdef const double* dp = &dirs[0, 0] if npix > 0 else NULL

    # single intersection pass, written surfel-major; U, V and g are
    # recomputed (bit-identically) only for hits that get composited
    m = 0
    with nogil:
        for s in range(N):
            if bbox[s, 0] > bbox[s, 1]:
                continue
            sp = &pk[s, 0]
            for y in range(bbox[s, 2], bbox[s, 3] + 1):
                for x in range(bbox[s, 0], bbox[s, 1] + 1):
                    pix = y * width + x
                    if _intersect(dp + 3 * pix, sp, &t, &U, &V, &g):
                        hpix[m] = <int>pix
                        hid[m] = <int>s
                        ht[m] = t
                        counts[pix + 1] += 1
                        m = m + 1
        for pix in range(npix):
            counts[pix + 1] += counts[pix]
    M = m
    offsets_np = counts_np
    cdef cnp.int64_t[::1] offsets = offsets_np
    cursor_np = counts_np[:npix].copy()
    cdef cnp.int64_t[::1] cursor = cursor_np
    # scatter keys to pixel-major order so each pixel reads one contiguous run
    pid_np = np.empty(M, dtype=np.int32)
    pt_np = np.empty(M, dtype=np.float64)
    cdef int[::1] pid = pid_np
    cdef double[::1] pt = pt_np
    with nogil:
        for k in range(M):
            j = cursor[hpix[k]]
            pid[j] = hid[k]
            pt[j] = ht[k]
            cursor[hpix[k]] = j + 1
    del hpix_np, hid_np, ht_np

    order_np = np.empty(M, dtype=np.int32)
    hu_np = np.empty(M, dtype=np.float64)
    hv_np = np.empty(M, dtype=np.float64)
    hg_np = np.empty(M, dtype=np.float64)
    hw_np = np.empty(M, dtype=np.float64)
    cdef int[::1] order = order_np
    cdef double[::1] hu = hu_np, hv = hv_np, hg = hg_np, hw = hw_np
    col_np = np.zeros((npix, 3), dtype=np.float64)
    alpha_np = np.zeros(npix, dtype=np.float64)
    depth_np = np.zeros(npix, dtype=np.float64)
    bnd_np = np.zeros(npix, dtype=np.float64)
    sem_np = np.full(npix, -1, dtype=np.int32)
    used_np = np.zeros(npix, dtype=np.int32)
    tfin_np = np.ones(npix, dtype=np.float64)
    cdef double[:, ::1] col = col_np
    cdef double[::1] alpha = alpha_np, depth = depth_np, bnd = bnd_np, tfin = tfin_np
    cdef int[::1] sem = sem_np, used = used_np
    cdef const int* pidp = &pid[0] if M > 0 else NULL
    cdef const double* ptp = &pt[0] if M > 0 else NULL
    cdef double* acc
    cdef int* heap
    cdef double T, a, w, wsum, dsum, best
    cdef Py_ssize_t cnt, hsize, top
    cdef int sid, c, lab

    for pix in prange(npix, nogil=True, num_threads=num_threads, schedule="static"):
        start = offsets[pix]
        end = offsets[pix + 1]
        cnt = end - start
        if cnt == 0:
            continue
        # heap of local slots keyed by (t, surfel id)
        heap = <int*>malloc(cnt * sizeof(int))
        acc = <double*>malloc(n_classes * sizeof(double))
        for k in range(cnt):
            heap[k] = <int>k
        hsize = cnt
        k = hsize // 2 - 1
        while k >= 0:
            _sift(heap, k, hsize, ptp + start, pidp + start)
            k = k - 1
        for c in range(n_classes):
            acc[c] = 0.0
        T = 1.0
        wsum = 0.0
        dsum = 0.0
        lab = sup[pix]
        j = 0
        while hsize > 0:
            top = start + heap[0]
            hsize = hsize - 1
            heap[0] = heap[hsize]
            if hsize > 0:
                _sift(heap, 0, hsize, ptp + start, pidp + start)
            order[start + j] = <int>top
            j = j + 1
            sid = pid[top]
            # plain assignments make these thread-private inside prange;
            # writes through their addresses alone would leave them shared
            t = 0.0
            U = 0.0
            V = 0.0
            g = 0.0
            _intersect(dp + 3 * pix, &pk[sid, 0], &t, &U, &V, &g)
            hu[top] = U
            hv[top] = V
            hg[top] = g
            a = opa[sid] * g
            w = a * T
            hw[top] = w
            col[pix, 0] += w * color[sid, 0]
            col[pix, 1] += w * color[sid, 1]
            col[pix, 2] += w * color[sid, 2]
            wsum = wsum + w
            dsum = dsum + w * pt[top]
            acc[cls[sid]] += w
            if lab >= 0 and cls[sid] != lab:
                bnd[pix] += w
            T = T * (1.0 - a)
            if T < T_MIN:
                break
        used[pix] = <int>j
        tfin[pix] = T
        alpha[pix] = wsum
        depth[pix] = dsum / (wsum if wsum > 1e-8 else 1e-8)
        if wsum >= 0.5:
            best = acc[0]
            sem[pix] = 0
            for c in range(1, n_classes):
                if acc[c] > best:
                    best = acc[c]
                    sem[pix] = c
        free(acc)
        free(heap)

    return dict(color=col_np, alpha=alpha_np, depth=depth_np, boundary=bnd_np,
                semantic=sem_np, offsets=offsets_np, n_used=used_np, t_final=tfin_np,
                hit_index=order_np, hit_id=pid_np, hit_t=pt_np, hit_u=hu_np,
                hit_v=hv_np, hit_g=hg_np, hit_w=hw_np)


cdef inline void _hit_grads(double* g, Py_ssize_t pix, int sid, int h, double T, double S, double f,
                            const double* o, const double[:, ::1] dirs, double[:, ::1] p,
                            double[:, ::1] tu, double[:, ::1] tv, double[:, ::1] n,
                            double[::1] su, double[::1] sv, double[::1] opa,
                            double[::1] ht, double[::1] hu, double[::1] hv, double[::1] hg,
                            double[:, ::1] d_color) noexcept nogil:
    cdef double gg = hg[h]
    cdef double a = opa[sid] * gg
    cdef double dA = T * (f - S)
    cdef double dG, gU, gV, r0, r1, r2, dr0, dr1, dr2, dn, kk
    g[15] = d_color[pix, 0] * a * T
    g[16] = d_color[pix, 1] * a * T
    g[17] = d_color[pix, 2] * a * T
    g[14] = dA * gg
    dG = dA * opa[sid]
    gU = -dG * hu[h] * gg
    gV = -dG * hv[h] * gg
    g[12] = -gU * hu[h]
    g[13] = -gV * hv[h]
    r0 = o[0] + ht[h] * dirs[pix, 0] - p[sid, 0]
    r1 = o[1] + ht[h] * dirs[pix, 1] - p[sid, 1]
    r2 = o[2] + ht[h] * dirs[pix, 2] - p[sid, 2]
    dr0 = gU * tu[sid, 0] / su[sid] + gV * tv[sid, 0] / sv[sid]
    dr1 = gU * tu[sid, 1] / su[sid] + gV * tv[sid, 1] / sv[sid]
    dr2 = gU * tu[sid, 2] / su[sid] + gV * tv[sid, 2] / sv[sid]
    dn = dirs[pix, 0] * n[sid, 0] + dirs[pix, 1] * n[sid, 1] + dirs[pix, 2] * n[sid, 2]
    kk = (dirs[pix, 0] * dr0 + dirs[pix, 1] * dr1 + dirs[pix, 2] * dr2) / dn
    g[0] = -dr0 + n[sid, 0] * kk
    g[1] = -dr1 + n[sid, 1] * kk
    g[2] = -dr2 + n[sid, 2] * kk
    g[3] = gU * r0 / su[sid]
    g[4] = gU * r1 / su[sid]
    g[5] = gU * r2 / su[sid]
    g[6] = gV * r0 / sv[sid]
    g[7] = gV * r1 / sv[sid]
    g[8] = gV * r2 / sv[sid]
    g[9] = -r0 * kk
    g[10] = -r1 * kk
    g[11] = -r2 * kk


def backward(double[::1] origin, const double[:, ::1] dirs,
             double[:, ::1] p, double[:, ::1] tu, double[:, ::1] tv, double[:, ::1] n,
             double[::1] su, double[::1] sv, double[::1] opa, double[:, ::1] color,
             int[::1] cls, int[::1] sup,
             cnp.int64_t[::1] offsets, int[::1] n_used, int[::1] hidx, int[::1] hid,
             double[::1] ht, double[::1] hu, double[::1] hv, double[::1] hg,
             double[:, ::1] d_color, double[::1] d_bound, int num_threads=1):
    """Per-surfel gradient rows.

    Every surfel row is summed in (pixel ascending, depth descending) order.
    One thread adds straight into the output; more threads write per-hit
    records first and reduce them in that same order, so the bits match.
    """
    cdef Py_ssize_t npix = offsets.shape[0] - 1
    cdef Py_ssize_t N = p.shape[0]
    cdef Py_ssize_t pix, k, start, nu, r, q
    cdef bint direct = num_threads <= 1
    coff_np = np.zeros(npix + 1, dtype=np.int64)
    np.cumsum(np.asarray(n_used), out=coff_np[1:])
    cdef cnp.int64_t[::1] coff = coff_np
    rec_np = np.zeros((0 if direct else coff_np[npix], NG), dtype=np.float64)
    cdef double[:, ::1] rec = rec_np
    out_np = np.zeros((N, NG), dtype=np.float64)
    cdef double[:, ::1] out = out_np
    cdef double T, a, S, f
    cdef double o[3]
    cdef double* Tk
    cdef double* g
    cdef int sid, lab, h
    o[0] = origin[0]; o[1] = origin[1]; o[2] = origin[2]

    for pix in prange(npix, nogil=True, num_threads=num_threads if num_threads > 0 else 1,
                      schedule="static"):
        start = offsets[pix]
        nu = n_used[pix]
        if nu == 0:
            continue
        if d_color[pix, 0] == 0.0 and d_color[pix, 1] == 0.0 and d_color[pix, 2] == 0.0 and d_bound[pix] == 0.0:
            continue
        Tk = <double*>malloc((nu + NG) * sizeof(double))
        g = Tk + nu
        T = 1.0
        for k in range(nu):
            h = hidx[start + k]
            Tk[k] = T
            T = T * (1.0 - opa[hid[h]] * hg[h])
        lab = sup[pix]
        S = 0.0
        k = nu - 1
        while k >= 0:
            h = hidx[start + k]
            sid = hid[h]
            a = opa[sid] * hg[h]
            f = (d_color[pix, 0] * color[sid, 0] + d_color[pix, 1] * color[sid, 1]
                 + d_color[pix, 2] * color[sid, 2])
            if lab >= 0 and cls[sid] != lab:
                f = f + d_bound[pix]
            _hit_grads(g, pix, sid, h, Tk[k], S, f, o, dirs, p, tu, tv, n, su, sv, opa,
                       ht, hu, hv, hg, d_color)
            S = f * a + (1.0 - a) * S
            if direct:
                for q in range(NG):
                    out[sid, q] += g[q]
            else:
                r = coff[pix] + k
                for q in range(NG):
                    rec[r, q] = g[q]
            k = k - 1
        free(Tk)

    if not direct:
        with nogil:
            for pix in range(npix):
                start = offsets[pix]
                k = n_used[pix] - 1
                while k >= 0:
                    sid = hid[hidx[start + k]]
                    r = coff[pix] + k
                    for q in range(NG):
                        out[sid, q] += rec[r, q]
                    k = k - 1
    return out_np
