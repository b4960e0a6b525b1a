"""Compiled inner loops (numba). Masks are int64 bitsets, so n <= 62."""

import numpy as np
from numba import njit

_CACHE = True


@njit(cache=_CACHE, nogil=True)
def popcount(m):
    c = 0
    while m:
        m &= m - 1
        c += 1
    return c


@njit(cache=_CACHE, nogil=True)
def prefer(cand, best):
    """True if ``cand`` beats ``best`` on (cardinality, lexicographic) order."""
    pc = popcount(cand)
    pb = popcount(best)
    if pc != pb:
        return pc < pb
    diff = cand ^ best
    if diff == 0:
        return False
    low = diff & -diff
    return (cand & low) != 0


@njit(cache=_CACHE, nogil=True)
def mask_to_x(mask, n):
    x = np.zeros(n, dtype=np.uint8)
    for i in range(n):
        if (mask >> i) & 1:
            x[i] = 1
    return x


@njit(cache=_CACHE, nogil=True)
def x_to_mask(x):
    m = np.int64(0)
    for i in range(x.shape[0]):
        if x[i]:
            m |= np.int64(1) << i
    return m


@njit(cache=_CACHE, nogil=True)
def qubo_value(q, x):
    n = q.shape[0]
    total = 0.0
    for i in range(n):
        if x[i]:
            total += q[i, i]
            for j in range(i + 1, n):
                if x[j]:
                    total += 2.0 * q[i, j]
    return total


# ---------------------------------------------------------------------------
# Exact QUBO maximization
# ---------------------------------------------------------------------------


@njit(cache=_CACHE, nogil=True)
def enumerate_qubo(q, tol):
    """Gray-code scan of all 2^n assignments of x'Qx."""
    n = q.shape[0]
    h = np.zeros(n)  # h[i] = sum_{j != i} q_ij x_j
    x = np.zeros(n, dtype=np.uint8)
    val = 0.0
    best_val = 0.0
    best_mask = np.int64(0)
    mask = np.int64(0)
    total = np.int64(1) << n
    for step in range(1, total):
        # bit to flip: index of lowest set bit of step
        k = 0
        s = step
        while (s & 1) == 0:
            s >>= 1
            k += 1
        if x[k]:
            val -= q[k, k] + 2.0 * h[k]
            x[k] = 0
            mask ^= np.int64(1) << k
            for i in range(n):
                if i != k:
                    h[i] -= q[i, k]
        else:
            val += q[k, k] + 2.0 * h[k]
            x[k] = 1
            mask ^= np.int64(1) << k
            for i in range(n):
                if i != k:
                    h[i] += q[i, k]
        if val > best_val + tol:
            best_val = val
            best_mask = mask
        elif val >= best_val - tol and prefer(mask, best_mask):
            if val > best_val:
                best_val = val
            best_mask = mask
    return best_mask, best_val


@njit(cache=_CACHE, nogil=True)
def bnb_qubo(q, tol, max_nodes, start_mask):
    """Depth-first branch and bound for max x'Qx.

    The bound adds, for every free variable, the positive part of its best
    possible marginal (diagonal + fixed-ones field + positive free couplings).
    Returns (mask, value, nodes, completed).
    """
    n = q.shape[0]
    # posfree[d, i]: sum over free j > d-1 (j >= d), j != i of max(q_ij, 0)
    posfree = np.zeros((n + 1, n))
    for d in range(n - 1, -1, -1):
        for i in range(n):
            posfree[d, i] = posfree[d + 1, i]
            if i != d and q[i, d] > 0:
                posfree[d, i] += q[i, d]
    hstack = np.zeros((n + 1, n))  # field from fixed ones at each depth
    vstack = np.zeros(n + 1)
    x = np.zeros(n, dtype=np.uint8)
    state = np.zeros(n + 1, dtype=np.int64)

    sx = mask_to_x(start_mask, n)
    best_mask = start_mask
    best_val = qubo_value(q, sx)
    if best_val < -tol or (best_val <= tol and prefer(np.int64(0), start_mask)):
        best_val = 0.0
        best_mask = np.int64(0)

    nodes = 0
    d = 0
    state[0] = 0
    while d >= 0:
        if d == n:
            val = vstack[n]
            m = x_to_mask(x)
            if val > best_val + tol:
                best_val = val
                best_mask = m
            elif val >= best_val - tol and prefer(m, best_mask):
                if val > best_val:
                    best_val = val
                best_mask = m
            d -= 1
            continue
        st = state[d]
        if st == 2:
            state[d] = 0
            x[d] = 0
            d -= 1
            continue
        nodes += 1
        if nodes > max_nodes:
            return best_mask, best_val, nodes, False
        xv = 1 if st == 0 else 0
        state[d] = st + 1
        x[d] = xv
        # child value and field
        if xv == 1:
            vstack[d + 1] = vstack[d] + q[d, d] + 2.0 * hstack[d, d]
            for i in range(n):
                hstack[d + 1, i] = hstack[d, i] + (q[i, d] if i != d else 0.0)
        else:
            vstack[d + 1] = vstack[d]
            for i in range(n):
                hstack[d + 1, i] = hstack[d, i]
        bound = vstack[d + 1]
        for i in range(d + 1, n):
            g = q[i, i] + 2.0 * hstack[d + 1, i] + posfree[d + 1, i]
            if g > 0:
                bound += g
        if bound >= best_val - tol:
            d += 1
            state[d] = 0
    return best_mask, best_val, nodes, True


# ---------------------------------------------------------------------------
# Local search members
# ---------------------------------------------------------------------------


@njit(cache=_CACHE, nogil=True)
def field(q, x):
    n = q.shape[0]
    h = np.zeros(n)
    for j in range(n):
        if x[j]:
            for i in range(n):
                if i != j:
                    h[i] += q[i, j]
    return h


@njit(cache=_CACHE, nogil=True)
def _flip(q, x, h, k):
    n = q.shape[0]
    if x[k]:
        x[k] = 0
        for i in range(n):
            if i != k:
                h[i] -= q[i, k]
    else:
        x[k] = 1
        for i in range(n):
            if i != k:
                h[i] += q[i, k]


@njit(cache=_CACHE, nogil=True)
def flip_gain(q, x, h, k):
    g = q[k, k] + 2.0 * h[k]
    return g if x[k] == 0 else -g


@njit(cache=_CACHE, nogil=True)
def steepest_ascent(q, x, tol):
    """Best-improvement single flips until 1-flip local optimum. Modifies x."""
    n = q.shape[0]
    h = field(q, x)
    val = qubo_value(q, x)
    while True:
        best_g = tol
        best_k = -1
        for k in range(n):
            g = flip_gain(q, x, h, k)
            if g > best_g:
                best_g = g
                best_k = k
        if best_k < 0:
            return val
        _flip(q, x, h, best_k)
        val += best_g


@njit(cache=_CACHE, nogil=True)
def tabu_chunk(q, x, h, val, tabu_until, it0, iters, tenure, best_x, best_val, tol):
    """Run ``iters`` tabu iterations from state (x, h, val); updates best_x in place.

    Returns (val, best_val). A tabu move is allowed if it beats the best.
    """
    n = q.shape[0]
    for t in range(it0, it0 + iters):
        sel = -1
        sel_g = -np.inf
        for k in range(n):
            g = flip_gain(q, x, h, k)
            if tabu_until[k] > t and val + g <= best_val + tol:
                continue
            if g > sel_g:
                sel_g = g
                sel = k
        if sel < 0:
            continue
        _flip(q, x, h, sel)
        val += sel_g
        tabu_until[sel] = t + tenure
        if val > best_val + tol:
            best_val = val
            for i in range(n):
                best_x[i] = x[i]
    return val, best_val


@njit(cache=_CACHE, nogil=True)
def anneal_chunk(q, x, h, val, temps, ks, us, best_x, best_val, tol):
    """Metropolis flips at the given temperatures; ks/us are pre-drawn randoms."""
    n = q.shape[0]
    for t in range(temps.shape[0]):
        k = ks[t]
        g = flip_gain(q, x, h, k)
        if g >= 0 or us[t] < np.exp(g / temps[t]):
            _flip(q, x, h, k)
            val += g
            if val > best_val + tol:
                best_val = val
                for i in range(n):
                    best_x[i] = x[i]
    return val, best_val


# ---------------------------------------------------------------------------
# Revenue kernels
# ---------------------------------------------------------------------------


@njit(cache=_CACHE, nogil=True)
def brute_force_revenue(v1, v2, r, v0, cap, rel_tol):
    """Scan all subsets of size <= cap; returns (mask, revenue) with tie-break."""
    n = v1.shape[0]
    a = np.zeros(n)  # sum_{j in C} V_ij
    b = np.zeros(n)  # sum_{j in C} (r_i + r_j) V_ij
    num = 0.0
    den = v0
    card = 0
    mask = np.int64(0)
    best_mask = np.int64(0)
    best = 0.0
    total = np.int64(1) << n
    for step in range(1, total):
        k = 0
        s = step
        while (s & 1) == 0:
            s >>= 1
            k += 1
        bit = np.int64(1) << k
        if mask & bit:
            mask ^= bit
            card -= 1
            num -= r[k] * v1[k] + b[k]
            den -= v1[k] + a[k]
            for i in range(n):
                if i != k:
                    a[i] -= v2[i, k]
                    b[i] -= (r[i] + r[k]) * v2[i, k]
        else:
            mask ^= bit
            card += 1
            num += r[k] * v1[k] + b[k]
            den += v1[k] + a[k]
            for i in range(n):
                if i != k:
                    a[i] += v2[i, k]
                    b[i] += (r[i] + r[k]) * v2[i, k]
        if card > cap:
            continue
        val = num / den
        tol = rel_tol * max(1.0, abs(best))
        if val > best + tol:
            best = val
            best_mask = mask
        elif val >= best - tol and prefer(mask, best_mask):
            if val > best:
                best = val
            best_mask = mask
    return best_mask, best


@njit(cache=_CACHE, nogil=True)
def adxopt_moves(v1, v2, r, v0, x, removals, b_limit, l, cap, tol):
    """Best add, delete and exchange move (each of up to ``l`` items).

    Returns (kind, add1, add2, del1, del2, revenue) where kind is 0 for no
    move, 1 add, 2 delete, 3 exchange; unused slots are -1.
    """
    n = v1.shape[0]
    a = np.zeros(n)
    bb = np.zeros(n)
    num = 0.0
    den = v0
    card = 0
    for i in range(n):
        if x[i]:
            card += 1
            num += r[i] * v1[i]
            den += v1[i]
            for j in range(n):
                if j != i:
                    a[j] += v2[i, j]
                    bb[j] += (r[i] + r[j]) * v2[i, j]
    # pair terms counted twice through a and bb
    pn = 0.0
    pd = 0.0
    for i in range(n):
        if x[i]:
            pn += bb[i]
            pd += a[i]
    num += 0.5 * pn
    den += 0.5 * pd

    out_items = np.empty(n, dtype=np.int64)
    in_items = np.empty(n, dtype=np.int64)
    no = 0
    ni = 0
    for i in range(n):
        if x[i]:
            in_items[ni] = i
            ni += 1
        elif removals[i] < b_limit:
            out_items[no] = i
            no += 1

    best_kind = 0
    best = -np.inf
    ba1 = -1
    ba2 = -1
    bd1 = -1
    bd2 = -1
    # deletions first so exchange can reuse the deleted state
    # ---- add
    for p in range(no):
        i = out_items[p]
        if card + 1 <= cap:
            n1 = num + r[i] * v1[i] + bb[i]
            d1 = den + v1[i] + a[i]
            val = n1 / d1
            if val > best + tol:
                best, best_kind, ba1, ba2, bd1, bd2 = val, 1, i, -1, -1, -1
        if l >= 2 and card + 2 <= cap:
            for p2 in range(p + 1, no):
                j = out_items[p2]
                n2 = num + r[i] * v1[i] + bb[i] + r[j] * v1[j] + bb[j] + (r[i] + r[j]) * v2[i, j]
                d2 = den + v1[i] + a[i] + v1[j] + a[j] + v2[i, j]
                val = n2 / d2
                if val > best + tol:
                    best, best_kind, ba1, ba2, bd1, bd2 = val, 1, i, j, -1, -1
    # ---- delete and exchange
    for p in range(ni):
        for p2 in range(p, ni if l >= 2 else p + 1):
            i = in_items[p]
            j = in_items[p2]
            if p2 == p:
                ndel = num - (r[i] * v1[i] + bb[i])
                ddel = den - (v1[i] + a[i])
                cdel = card - 1
                jj = -1
            else:
                ndel = num - (r[i] * v1[i] + bb[i]) - (r[j] * v1[j] + bb[j]) + (r[i] + r[j]) * v2[i, j]
                ddel = den - (v1[i] + a[i]) - (v1[j] + a[j]) + v2[i, j]
                cdel = card - 2
                jj = j
            val = ndel / ddel
            if val > best + tol:
                best, best_kind, ba1, ba2, bd1, bd2 = val, 2, -1, -1, i, jj
            # exchange: add up to l outside items to C minus deleted
            for q1 in range(no):
                u = out_items[q1]
                au = a[u] - v2[u, i] - (v2[u, jj] if jj >= 0 else 0.0)
                bu = bb[u] - (r[u] + r[i]) * v2[u, i] - ((r[u] + r[jj]) * v2[u, jj] if jj >= 0 else 0.0)
                if cdel + 1 <= cap:
                    val = (ndel + r[u] * v1[u] + bu) / (ddel + v1[u] + au)
                    if val > best + tol:
                        best, best_kind, ba1, ba2, bd1, bd2 = val, 3, u, -1, i, jj
                if l >= 2 and cdel + 2 <= cap:
                    for q2 in range(q1 + 1, no):
                        w = out_items[q2]
                        aw = a[w] - v2[w, i] - (v2[w, jj] if jj >= 0 else 0.0)
                        bw = bb[w] - (r[w] + r[i]) * v2[w, i] - ((r[w] + r[jj]) * v2[w, jj] if jj >= 0 else 0.0)
                        n2 = ndel + r[u] * v1[u] + bu + r[w] * v1[w] + bw + (r[u] + r[w]) * v2[u, w]
                        d2 = ddel + v1[u] + au + v1[w] + aw + v2[u, w]
                        val = n2 / d2
                        if val > best + tol:
                            best, best_kind, ba1, ba2, bd1, bd2 = val, 3, u, w, i, jj
    return best_kind, ba1, ba2, bd1, bd2, best, num / den
