"""Pure numpy compositing backend.

Hits are gathered per surfel inside its screen bounding box, sorted by
(pixel, depth, surfel id), then composited one depth layer at a time across
all pixels, which reproduces the per-pixel front-to-back loop exactly.
Only composited hits are returned, so ``hit_index`` is the identity.
"""

import numpy as np

NEAR = 1e-4
CUT2 = 9.0
PAR_EPS = 1e-9
T_MIN = 1e-4
NG = 18


def _gather_hits(origin, dirs, p, tu, tv, n, su, sv, bbox, width):
    pix_l, sid_l, t_l, u_l, v_l = [], [], [], [], []
    for s in range(p.shape[0]):
        x0, x1, y0, y1 = bbox[s]
        if x0 > x1:
            continue
        xs = np.arange(x0, x1 + 1)
        ys = np.arange(y0, y1 + 1)
        pix = (ys[:, None] * width + xs[None, :]).reshape(-1)
        d = dirs[pix]
        dn = d @ n[s]
        ok = np.abs(dn) >= PAR_EPS
        t = np.where(ok, ((p[s] - origin) @ n[s]) / np.where(ok, dn, 1.0), 0.0)
        ok &= t > NEAR
        r = (origin - p[s]) + t[:, None] * d
        U = r @ (tu[s] / su[s])
        V = r @ (tv[s] / sv[s])
        ok &= U * U + V * V <= CUT2
        pix_l.append(pix[ok])
        sid_l.append(np.full(ok.sum(), s, dtype=np.int32))
        t_l.append(t[ok])
        u_l.append(U[ok])
        v_l.append(V[ok])
    if not pix_l:
        e = np.zeros(0)
        return np.zeros(0, np.int64), np.zeros(0, np.int32), e, e, e
    pix = np.concatenate(pix_l)
    sid = np.concatenate(sid_l)
    t = np.concatenate(t_l)
    U = np.concatenate(u_l)
    V = np.concatenate(v_l)
    order = np.lexsort((sid, t, pix))
    return pix[order], sid[order], t[order], U[order], V[order]


def _layers(pix, npix):
    counts = np.bincount(pix, minlength=npix)
    offsets = np.zeros(npix + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    rank = np.arange(pix.shape[0]) - offsets[pix]
    return counts, offsets, rank


def forward(origin, dirs, p, tu, tv, n, su, sv, opa, color, cls, bbox, sup,
            width, height, n_classes, num_threads=1):
    npix = width * height
    pix, sid, t, U, V = _gather_hits(origin, dirs, p, tu, tv, n, su, sv, bbox, width)
    g = np.exp(-0.5 * (U * U + V * V))
    counts, offsets, rank = _layers(pix, npix)
    M = pix.shape[0]
    kmax = int(counts.max()) if M else 0

    col = np.zeros((npix, 3))
    wsum = np.zeros(npix)
    dsum = np.zeros(npix)
    bnd = np.zeros(npix)
    acc = np.zeros((npix, n_classes))
    T = np.ones(npix)
    alive = np.ones(npix, dtype=bool)
    used = np.zeros(npix, dtype=np.int32)
    hw = np.zeros(M)
    for k in range(kmax):
        sel = np.nonzero((rank == k) & alive[pix])[0]
        if sel.size == 0:
            break
        px = pix[sel]
        s = sid[sel]
        a = opa[s] * g[sel]
        w = a * T[px]
        hw[sel] = w
        col[px] += w[:, None] * color[s]
        wsum[px] += w
        dsum[px] += w * t[sel]
        acc[px, cls[s]] += w
        lab = sup[px]
        bnd[px] += np.where((lab >= 0) & (cls[s] != lab), w, 0.0)
        T[px] = T[px] * (1.0 - a)
        used[px] = k + 1
        alive[px[T[px] < T_MIN]] = False

    sem = np.full(npix, -1, dtype=np.int32)
    vis = wsum >= 0.5
    if n_classes:
        sem[vis] = np.argmax(acc[vis], axis=1)
    depth = dsum / np.maximum(wsum, 1e-8)
    keep = rank < used[pix]
    coff = np.zeros(npix + 1, dtype=np.int64)
    np.cumsum(used, out=coff[1:])
    return dict(color=col, alpha=wsum, depth=depth, boundary=bnd, semantic=sem,
                offsets=coff, n_used=used, t_final=T,
                hit_index=np.arange(int(coff[-1]), dtype=np.int32), hit_id=sid[keep],
                hit_t=t[keep], hit_u=U[keep], hit_v=V[keep], hit_g=g[keep], hit_w=hw[keep])


def composited(offsets, n_used, hit_index):
    """(pixel, hit) pairs of every composited hit, in (pixel, depth) order."""
    n_used = np.asarray(n_used, dtype=np.int64)
    npix = n_used.shape[0]
    pix = np.repeat(np.arange(npix), n_used)
    first = np.zeros(npix + 1, dtype=np.int64)
    np.cumsum(n_used, out=first[1:])
    pos = np.asarray(offsets[:-1])[pix] + np.arange(pix.shape[0]) - first[pix]
    return pix, np.asarray(hit_index, dtype=np.int64)[pos]


def backward(origin, dirs, p, tu, tv, n, su, sv, opa, color, cls, sup,
             offsets, n_used, hidx, hid, ht, hu, hv, hg, d_color, d_bound, num_threads=1):
    npix = offsets.shape[0] - 1
    N = p.shape[0]
    pix, idx = composited(offsets, n_used, hidx)
    hid, ht, hu, hv, hg = hid[idx], ht[idx], hu[idx], hv[idx], hg[idx]
    M = idx.shape[0]
    first = np.zeros(npix + 1, dtype=np.int64)
    np.cumsum(n_used, out=first[1:])
    rank = np.arange(M) - first[pix]
    live = np.ones(M, dtype=bool)
    a_all = opa[hid] * hg

    # transmittance in front of each hit
    Tk = np.zeros(M)
    T = np.ones(npix)
    kmax = int(n_used.max()) if npix else 0
    layer_idx = []
    for k in range(kmax):
        sel = np.nonzero((rank == k) & live)[0]
        layer_idx.append(sel)
        Tk[sel] = T[pix[sel]]
        T[pix[sel]] = T[pix[sel]] * (1.0 - a_all[sel])

    lab = sup[pix]
    f = np.einsum("ij,ij->i", d_color[pix], color[hid])
    f = f + np.where((lab >= 0) & (cls[hid] != lab), d_bound[pix], 0.0)
    dA = np.zeros(M)
    S = np.zeros(npix)
    for sel in reversed(layer_idx):
        px = pix[sel]
        a = a_all[sel]
        dA[sel] = Tk[sel] * (f[sel] - S[px])
        S[px] = f[sel] * a + (1.0 - a) * S[px]

    rec = np.zeros((M, NG))
    w = a_all * Tk
    rec[:, 15:18] = d_color[pix] * w[:, None]
    rec[:, 14] = dA * hg
    dG = dA * opa[hid]
    gU = -dG * hu * hg
    gV = -dG * hv * hg
    rec[:, 12] = -gU * hu
    rec[:, 13] = -gV * hv
    d = dirs[pix]
    r = origin + ht[:, None] * d - p[hid]
    su_h = su[hid][:, None]
    sv_h = sv[hid][:, None]
    dr = gU[:, None] * tu[hid] / su_h + gV[:, None] * tv[hid] / sv_h
    dn = np.einsum("ij,ij->i", d, n[hid])
    kk = np.einsum("ij,ij->i", d, dr) / np.where(live, dn, 1.0)
    rec[:, 0:3] = -dr + n[hid] * kk[:, None]
    rec[:, 3:6] = gU[:, None] * r / su_h
    rec[:, 6:9] = gV[:, None] * r / sv_h
    rec[:, 9:12] = -r * kk[:, None]
    rec[~live] = 0.0

    out = np.zeros((N, NG))
    for q in range(NG):
        out[:, q] = np.bincount(hid, weights=rec[:, q], minlength=N)
    return out
