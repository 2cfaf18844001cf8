"""Compiled inner loops.

Everything that touches individual voxels or embedding rows lives here so
that the per-call Python APIs (``draw_negatives``, ``train_step``,
``predict_distribution``) and the bulk loops run literally the same code.
Random draws come from a numpy ``Generator`` passed in by the caller, so a
seeded run is reproducible and shards never share a stream.
"""

import math

import numpy as np
from numba import njit, prange

NORM_EPS = 1e-12
NO_MARK = -2
REJECTION_TRIES = 64
# Below this eligible mass, rejection from the full table is wasteful.
DIRECT_SCAN_MASS = 0.1
# sigmoid(x) < 1 in float64 for every x below this
SIGMOID_SAFE = 30.0
CUT_SLACK = 1e-9


@njit(cache=True, error_model="numpy")
def sigmoid(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True, error_model="numpy")
def log_sigmoid(x):
    if x >= 0.0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


@njit(cache=True, error_model="numpy")
def sigmoid_and_log(x):
    """``(sigmoid(x), log sigmoid(x))`` sharing one exponential."""
    e = math.exp(-abs(x))
    if x >= 0.0:
        return 1.0 / (1.0 + e), -math.log1p(e)
    return e / (1.0 + e), x - math.log1p(e)


# Reassociation lets LLVM vectorize the reduction; NaN/Inf semantics are kept.
@njit(cache=True, error_model="numpy", fastmath={"reassoc", "contract"})
def dot(a, b):
    s = 0.0
    for i in range(a.shape[0]):
        s += a[i] * b[i]
    return s


@njit(cache=True, error_model="numpy")
def norm(a):
    return math.sqrt(dot(a, a))


@njit(cache=True, error_model="numpy")
def threshold(eta, batch, literal_max):
    raw = 4.0 * eta * eta / (batch * batch) + 1.0 / batch
    if literal_max:
        return max(raw, 1.0)
    return min(raw, 1.0)


@njit(cache=True, error_model="numpy")
def gather_context(ids, nx, ny, nz, v, window, out):
    """Symbols within Chebyshev radius ``window`` of flat voxel ``v``.

    Scan order is z, then y, then x offsets; the center is skipped and
    out-of-bounds neighbours are dropped.
    """
    x = v % nx
    y = (v // nx) % ny
    z = v // (nx * ny)
    m = 0
    for dz in range(-window, window + 1):
        zz = z + dz
        if zz < 0 or zz >= nz:
            continue
        for dy in range(-window, window + 1):
            yy = y + dy
            if yy < 0 or yy >= ny:
                continue
            for dx in range(-window, window + 1):
                xx = x + dx
                if xx < 0 or xx >= nx:
                    continue
                if dx == 0 and dy == 0 and dz == 0:
                    continue
                out[m] = ids[xx + nx * (yy + ny * zz)]
                m += 1
    return m


@njit(cache=True, error_model="numpy")
def _excluded(w, stamp, mark, skip):
    return w == skip or stamp[w] == mark


@njit(cache=True, error_model="numpy")
def _draw_scan(u, weights, stamp, mark, skip, elig_mass):
    """Inverse-CDF draw over eligible symbols for a uniform ``u``."""
    target = u * elig_mass
    acc = 0.0
    last = -1
    for w in range(weights.shape[0]):
        if weights[w] <= 0.0 or _excluded(w, stamp, mark, skip):
            continue
        acc += weights[w]
        last = w
        if acc > target:
            return w
    return last


@njit(cache=True, error_model="numpy")
def draw_alias(gen, prob, alias):
    n = prob.shape[0]
    u = gen.random() * n
    i = int(u)
    if i >= n:
        i = n - 1
    if u - i < prob[i]:
        return i
    return alias[i]


@njit(cache=True, error_model="numpy")
def _draw_reject(gen, prob, alias, weights, stamp, mark, skip):
    # Kept free of any fallback path so that it inlines into the hot loops.
    for _ in range(REJECTION_TRIES):
        w = draw_alias(gen, prob, alias)
        if weights[w] > 0.0 and not _excluded(w, stamp, mark, skip):
            return w
    return -1


@njit(cache=True, error_model="numpy")
def draw_base(gen, prob, alias, weights, stamp, mark, skip, elig_mass):
    """One draw from the unigram^0.75 law restricted to eligible symbols.

    Rejection against the alias table while the eligible mass is large,
    otherwise (or after too many rejections) an explicit inverse-CDF scan.
    """
    w = -1
    if elig_mass >= DIRECT_SCAN_MASS:
        w = _draw_reject(gen, prob, alias, weights, stamp, mark, skip)
    if w < 0:
        w = _draw_scan(gen.random(), weights, stamp, mark, skip, elig_mass)
    return w


@njit(cache=True, error_model="numpy")
def _fill_base(gen, prob, alias, weights, stamp, mark, skip, elig_mass, reject, out, n):
    # Two passes: the rejection loop stays branch-light, failures are rare.
    for j in range(n):
        out[j] = _draw_reject(gen, prob, alias, weights, stamp, mark, skip) if reject else -1
    for j in range(n):
        if out[j] < 0:
            out[j] = _draw_scan(gen.random(), weights, stamp, mark, skip, elig_mass)


@njit(cache=True, error_model="numpy")
def draw_negatives(gen, zc, Zhat, prob, alias, weights, stamp, mark, skip, elig_mass, n_elig,
                   k, pool_m, use_pool, thr, out, pool_w, pool_s):
    """Fill ``out[:r]`` with negatives for center vector ``zc``; return ``r``.

    Without the pool, ``k`` symbols come straight from the restricted base
    law.  With it, ``pool_m`` candidates are drawn, those whose
    ``sigmoid(zhat_w . zc) >= thr`` are dropped, and ``k`` are resampled
    from the survivors with softmax weights on ``zhat_w . zc``.
    """
    if n_elig <= 0 or elig_mass <= 0.0:
        return 0
    reject = elig_mass >= DIRECT_SCAN_MASS
    if not use_pool:
        _fill_base(gen, prob, alias, weights, stamp, mark, skip, elig_mass, reject, out, k)
        return k
    _fill_base(gen, prob, alias, weights, stamp, mark, skip, elig_mass, reject, pool_w, pool_m)
    # Compare raw scores with logit(thr); only scores near the cut need
    # the exact sigmoid test.
    cut = math.log(thr / (1.0 - thr)) if thr < 1.0 else SIGMOID_SAFE
    kept = 0
    best = -np.inf
    for i in range(pool_m):
        w = pool_w[i]
        s = dot(Zhat[w], zc)
        if s >= cut - CUT_SLACK and sigmoid(s) >= thr:
            continue
        pool_w[kept] = w
        pool_s[kept] = s
        if s > best:
            best = s
        kept += 1
    if kept == 0:
        return 0
    total = 0.0
    for i in range(kept):
        total += math.exp(pool_s[i] - best)
        pool_s[i] = total
    for j in range(k):
        u = gen.random() * total
        i = 0
        while i < kept - 1 and pool_s[i] <= u:
            i += 1
        out[j] = pool_w[i]
    return k


@njit(cache=True, error_model="numpy")
def sgd_pair(Z, Zhat, c, o, negs, nneg, alpha, lam, k, e):
    """One positive pair plus its negatives, in the order of the update rule.

    Returns the penalized objective at the pre-update state.  Norm penalty
    terms are skipped for vectors with norm below ``NORM_EPS``.
    """
    zc = Z[c]
    d = zc.shape[0]
    zo = Zhat[o]
    score = dot(zo, zc)
    sig, obj = sigmoid_and_log(score)
    g = 1.0 - sig
    nc = norm(zc)
    if lam > 0.0 and nc >= NORM_EPS:
        obj -= lam * nc
        pc = lam / nc
        for i in range(d):
            e[i] = alpha * (g * zo[i] - pc * zc[i])
    else:
        for i in range(d):
            e[i] = alpha * g * zo[i]
    for i in range(d):
        zo[i] += alpha * g * zc[i]
    lam_neg = lam / (k + 1)
    for j in range(nneg):
        zw = Zhat[negs[j]]
        score = dot(zw, zc)
        sig, lsig = sigmoid_and_log(score)
        g = -sig
        obj += lsig - score  # log sigmoid(-x) = log sigmoid(x) - x
        for i in range(d):
            e[i] += alpha * g * zw[i]
        nw = norm(zw)
        if lam_neg > 0.0 and nw >= NORM_EPS:
            obj -= lam_neg * nw
            pw = lam_neg / nw
            for i in range(d):
                zw[i] += alpha * (g * zc[i] - pw * zw[i])
        else:
            for i in range(d):
                zw[i] += alpha * g * zc[i]
    for i in range(d):
        zc[i] += e[i]
    return obj


@njit(cache=True, error_model="numpy")
def train_range(gen, ids, nx, ny, nz, order, start, stop, Z, Zhat, prob, alias, weights,
                window, k, alpha, lam, adaptive, self_paced, batch, pairs_before,
                pool_m, literal_max, log_sum, log_cnt, log_every):
    """Train on ``order[start:stop]``; returns the number of pairs processed.

    The curriculum counter and the objective log both advance per pair.
    """
    n_sym = Z.shape[0]
    d = Z.shape[1]
    stamp = np.full(n_sym, -1, dtype=np.int64)
    ctx = np.empty((2 * window + 1) ** 3, dtype=np.int64)
    negs = np.empty(k, dtype=np.int64)
    pool_w = np.empty(max(pool_m, 1), dtype=np.int64)
    pool_s = np.empty(max(pool_m, 1), dtype=np.float64)
    e = np.empty(d, dtype=np.float64)
    n_pos = 0
    for w in range(n_sym):
        if weights[w] > 0.0:
            n_pos += 1
    lam_eff = lam if adaptive else 0.0
    pairs = 0
    for step in range(start, stop):
        v = order[step]
        m = gather_context(ids, nx, ny, nz, v, window, ctx)
        if m == 0:
            continue
        c = ids[v]
        mark = step
        elig_mass = 1.0
        n_elig = n_pos
        if adaptive:
            stamp[c] = mark
            if weights[c] > 0.0:
                elig_mass -= weights[c]
                n_elig -= 1
            for j in range(m):
                s = ctx[j]
                if stamp[s] != mark:
                    stamp[s] = mark
                    if weights[s] > 0.0:
                        elig_mass -= weights[s]
                        n_elig -= 1
        for j in range(m):
            o = ctx[j]
            seen = pairs_before + pairs
            thr = threshold(1.0 + seen // batch, batch, literal_max)
            use_pool = self_paced and thr > 0.5
            if adaptive:
                nneg = draw_negatives(gen, Z[c], Zhat, prob, alias, weights, stamp, mark, -1,
                                      elig_mass, n_elig, k, pool_m, use_pool, thr,
                                      negs, pool_w, pool_s)
            else:
                wo = weights[o]
                nneg = draw_negatives(gen, Z[c], Zhat, prob, alias, weights, stamp, NO_MARK, o,
                                      1.0 - wo, n_pos - (1 if wo > 0.0 else 0), k,
                                      pool_m, use_pool, thr, negs, pool_w, pool_s)
            obj = sgd_pair(Z, Zhat, c, o, negs, nneg, alpha, lam_eff, k, e)
            bucket = seen // log_every
            if bucket < log_sum.shape[0]:
                log_sum[bucket] += obj
                log_cnt[bucket] += 1
            pairs += 1
    return pairs


@njit(cache=True, parallel=True, error_model="numpy")
def train_shards(gens, ids, nx, ny, nz, order, bounds, Z, Zhat, prob, alias, weights,
                 window, k, alpha, lam, adaptive, self_paced, batch, pairs_before,
                 pool_m, literal_max, log_sum, log_cnt, log_every):
    """Lock-free parallel training over contiguous shards of ``order``.

    Shards share ``Z``/``Zhat`` without synchronization.  Each shard
    approximates the global batch counter by scaling its own progress by
    the shard count.
    """
    n_shards = bounds.shape[0] - 1
    done = np.zeros(n_shards, dtype=np.int64)
    for s in prange(n_shards):
        done[s] = train_range(gens[s], ids, nx, ny, nz, order, bounds[s], bounds[s + 1], Z, Zhat,
                              prob, alias, weights, window, k, alpha, lam, adaptive, self_paced,
                              max(batch // n_shards, 1), pairs_before // n_shards,
                              pool_m, literal_max, log_sum[s], log_cnt[s], log_every)
    return done.sum()


@njit(cache=True, error_model="numpy")
def context_scores(S, ctx, m, counts, distinct, out):
    """Mean over context symbols of column ``S[:, o]`` (multiplicity aware)."""
    nd = 0
    for j in range(m):
        o = ctx[j]
        if counts[o] == 0:
            distinct[nd] = o
            nd += 1
        counts[o] += 1
    n_sym = S.shape[0]
    for s in range(n_sym):
        out[s] = 0.0
    for j in range(nd):
        o = distinct[j]
        cnt = counts[o]
        for s in range(n_sym):
            out[s] += cnt * S[s, o]
        counts[o] = 0
    for s in range(n_sym):
        out[s] /= m


@njit(cache=True, error_model="numpy")
def argmax_lowest(a):
    best = 0
    for i in range(1, a.shape[0]):
        if a[i] > a[best]:
            best = i
    return best


@njit(cache=True, parallel=True, error_model="numpy")
def predict_volume(ids, nx, ny, nz, window, S):
    n_vox = ids.shape[0]
    n_sym = S.shape[0]
    side = (2 * window + 1) ** 3
    out = np.empty(n_vox, dtype=np.int32)
    n_chunks = 64
    for chunk in prange(n_chunks):
        ctx = np.empty(side, dtype=np.int64)
        counts = np.zeros(n_sym, dtype=np.int64)
        distinct = np.empty(side, dtype=np.int64)
        scores = np.empty(n_sym, dtype=np.float64)
        lo = chunk * n_vox // n_chunks
        hi = (chunk + 1) * n_vox // n_chunks
        for v in range(lo, hi):
            m = gather_context(ids, nx, ny, nz, v, window, ctx)
            if m == 0:
                out[v] = ids[v]
                continue
            context_scores(S, ctx, m, counts, distinct, scores)
            out[v] = argmax_lowest(scores)
    return out
