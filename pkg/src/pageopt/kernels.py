"""Hot inner loops with a numba path and a vectorized numpy path.

Both paths implement identical semantics; :func:`pageopt._accel.numba_enabled`
picks one at call time. ``tests/test_kernels.py`` checks the two agree and
``benchmarks/bench_kernels.py`` times them.
"""
import numpy as np

from ._accel import njit, numba_enabled


# ---------------------------------------------------------------- swap


def _swap_numpy(order, family_of, limit):
    order = order.copy()
    R, N = order.shape
    for j in range(1, min(limit, N)):
        fam = family_of[order]
        rows = np.nonzero(fam[:, j] == fam[:, j - 1])[0]
        if rows.size == 0 or j + 1 >= N:
            continue
        ok = fam[rows, j + 1:] != fam[rows, j - 1][:, None]
        has = ok.any(axis=1)
        rows = rows[has]
        k = j + 1 + np.argmax(ok[has], axis=1)
        tmp = order[rows, j].copy()
        order[rows, j] = order[rows, k]
        order[rows, k] = tmp
    return order


@njit
def _swap_numba(order, family_of, limit):
    out = order.copy()
    R, N = out.shape
    top = min(limit, N)
    for r in range(R):
        for j in range(1, top):
            prev = family_of[out[r, j - 1]]
            if family_of[out[r, j]] != prev:
                continue
            for k in range(j + 1, N):
                if family_of[out[r, k]] != prev:
                    tmp = out[r, j]
                    out[r, j] = out[r, k]
                    out[r, k] = tmp
                    break
    return out


def swap_rows(order: np.ndarray, family_of: np.ndarray, limit: int) -> np.ndarray:
    """Top-down greedy swap over each row of ranked module ids.

    Scans positions ``1..limit-1``; when a module shares its family with the
    one above, it is exchanged with the nearest lower-ranked module of a
    different family. Rows with no legal swap are left as they are.
    """
    order = np.ascontiguousarray(order, dtype=np.int64)
    family_of = np.ascontiguousarray(family_of, dtype=np.int64)
    if numba_enabled():
        return _swap_numba(order, family_of, int(limit))
    return _swap_numpy(order, family_of, int(limit))


# ---------------------------------------------------------------- demote


def _demote_numpy(scores, family, gamma, K):
    s = scores.astype(np.float64, copy=True)
    R, N = s.shape
    out = np.empty((R, K), dtype=np.int64)
    rows = np.arange(R)
    last = np.full(R, -1, dtype=np.int64)
    for step in range(K):
        # the previous slot's family is barred while any other family remains
        barred = family[None, :] == last[:, None]
        alt = np.where(barred, -np.inf, s)
        usable = np.isfinite(alt).any(axis=1)
        pick = np.where(usable, np.argmax(alt, axis=1), np.argmax(s, axis=1))
        out[:, step] = pick
        last = family[pick]
        same = family[None, :] == family[pick][:, None]
        s = np.where(same, s * gamma, s)
        s[rows, pick] = -np.inf
    return out


@njit
def _demote_numba(scores, family, gamma, K):
    R, N = scores.shape
    out = np.empty((R, K), dtype=np.int64)
    s = np.empty(N, dtype=np.float64)
    taken = np.zeros(N, dtype=np.bool_)
    for r in range(R):
        for i in range(N):
            s[i] = scores[r, i]
            taken[i] = False
        last = -1
        for step in range(K):
            best = -1
            bv = -np.inf
            for i in range(N):
                if not taken[i] and family[i] != last and (best < 0 or s[i] > bv):
                    best = i
                    bv = s[i]
            if best < 0:
                for i in range(N):
                    if not taken[i] and (best < 0 or s[i] > bv):
                        best = i
                        bv = s[i]
            out[r, step] = best
            last = family[best]
            taken[best] = True
            f = family[best]
            for i in range(N):
                if not taken[i] and family[i] == f:
                    s[i] *= gamma
    return out


def demote_rows(scores: np.ndarray, family: np.ndarray, gamma: float, K: int) -> np.ndarray:
    """Sequential argmax with multiplicative same-family demotion.

    ``scores`` is (rows, candidates); ``family`` gives each candidate column's
    family. Returns (rows, K) column indices in selection order. Demotion
    compounds: a family's third pick has been scaled by ``gamma**2``. The
    family picked last is skipped at the next step unless nothing else is
    left, so adjacent slots never share a family when avoidable.
    """
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    family = np.ascontiguousarray(family, dtype=np.int64)
    if numba_enabled():
        return _demote_numba(scores, family, float(gamma), int(K))
    return _demote_numpy(scores, family, float(gamma), int(K))


# ---------------------------------------------------------------- attribution


def _attr_numpy(user, ts, is_click, is_purchase, T, eta, eps):
    n = ts.shape[0]
    w = np.zeros(n, dtype=np.float64)
    if n == 0:
        return w
    start = np.ones(n, dtype=bool)
    start[1:] = (user[1:] != user[:-1]) | (ts[1:] - ts[:-1] > T)
    session = np.cumsum(start)
    idx = np.where(is_purchase, np.arange(n), n)
    nxt = np.minimum.accumulate(idx[::-1])[::-1]
    has = (nxt < n) & is_click
    cand = np.nonzero(has)[0]
    cand = cand[session[nxt[cand]] == session[cand]]
    w[cand] = eta ** ((ts[nxt[cand]] - ts[cand]) / (eps * T))
    return w


@njit
def _attr_numba(user, ts, is_click, is_purchase, T, eta, eps):
    n = ts.shape[0]
    w = np.zeros(n, dtype=np.float64)
    # walk backwards, tracking the nearest later purchase inside the session
    next_p = -1.0
    have = False
    for i in range(n - 1, -1, -1):
        if i < n - 1 and (user[i + 1] != user[i] or ts[i + 1] - ts[i] > T):
            have = False
        if is_purchase[i]:
            next_p = ts[i]
            have = True
        if is_click[i] and have:
            w[i] = eta ** ((next_p - ts[i]) / (eps * T))
    return w


def attribution_sweep(user, ts, is_click, is_purchase, T, eta, eps) -> np.ndarray:
    """Purchase-intent weight per event for events sorted by (user, time).

    Sessions break where the user changes or the gap exceeds ``T`` (a gap of
    exactly ``T`` stays in session). Each click gets ``eta**((t_p - t_c)/(eps*T))``
    from the nearest purchase at or after it in the same session, which is
    the maximum over all later in-session purchases. Non-clicks get 0.
    Callers order a click before a purchase carrying the same timestamp.
    """
    user = np.ascontiguousarray(user, dtype=np.int64)
    ts = np.ascontiguousarray(ts, dtype=np.float64)
    is_click = np.ascontiguousarray(is_click, dtype=np.bool_)
    is_purchase = np.ascontiguousarray(is_purchase, dtype=np.bool_)
    if numba_enabled():
        return _attr_numba(user, ts, is_click, is_purchase, float(T), float(eta), float(eps))
    return _attr_numpy(user, ts, is_click, is_purchase, float(T), float(eta), float(eps))
