"""Numba kernels shared by the samplers.

Every kernel operates on the flattened array form of a model (see
``core.CompiledChmm.kernel_args``) plus, where a trajectory grid is
involved, two incrementally-maintained count structures:

- ``icnt[pen, cls, t]``: present chains of the class occupying the
  coupling state at time t;
- ``mall[pen, cls, t, f, g]``: present chains of the class transitioning
  f -> g between t and t+1 (chains absent at t+1 are frozen and excluded).

Randomness comes from an explicit splitmix64 counter state (a length-1
uint64 array) so that results are reproducible independently of thread
scheduling.  All kernels release the GIL.
"""

import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_INV53 = 1.0 / 9007199254740992.0  # 2**-53


@njit(cache=True, nogil=True, inline="always")
def _u01(state):
    state[0] += _GOLDEN
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    z = z ^ (z >> np.uint64(31))
    return float(z >> np.uint64(11)) * _INV53


@njit(cache=True, nogil=True, inline="always")
def _sample_row(row, norm, u):
    """Sample an index from a non-negative row summing to norm > 0."""
    target = u * norm
    acc = 0.0
    for s in range(row.shape[0] - 1):
        acc += row[s]
        if target < acc:
            return s
    return row.shape[0] - 1


@njit(cache=True, nogil=True)
def _logmeanexp(values):
    n = values.shape[0]
    mx = -np.inf
    for i in range(n):
        if values[i] > mx:
            mx = values[i]
    if mx == -np.inf:
        return -np.inf
    acc = 0.0
    for i in range(n):
        acc += np.exp(values[i] - mx)
    return mx + np.log(acc / n)


# ---------------------------------------------------------------------------
# count maintenance
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _build_counts(states, coupling, pen_of, cls_of, present, icnt, mall):
    icnt[:] = 0
    mall[:] = 0
    n_chains, n_steps = states.shape
    for k in range(n_chains):
        pen = pen_of[k]
        c = cls_of[k]
        for t in range(n_steps):
            if present[k, t]:
                if states[k, t] == coupling:
                    icnt[pen, c, t] += 1
                if t < n_steps - 1 and present[k, t + 1]:
                    mall[pen, c, t, states[k, t], states[k, t + 1]] += 1


@njit(cache=True, nogil=True)
def _apply_chain_path(k, states, icnt, mall, newpath, coupling, pen_of, cls_of, present):
    """Overwrite chain k with newpath, updating counts in O(T)."""
    n_steps = states.shape[1]
    pen = pen_of[k]
    c = cls_of[k]
    for t in range(n_steps):
        old = states[k, t]
        new = newpath[t]
        if present[k, t]:
            if old == coupling and new != coupling:
                icnt[pen, c, t] -= 1
            elif new == coupling and old != coupling:
                icnt[pen, c, t] += 1
        if t < n_steps - 1 and present[k, t] and present[k, t + 1]:
            old_g = states[k, t + 1]
            new_g = newpath[t + 1]
            if old != new or old_g != new_g:
                mall[pen, c, t, old, old_g] -= 1
                mall[pen, c, t, new, new_g] += 1
        states[k, t] = new


# ---------------------------------------------------------------------------
# complete-data log density
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _complete_logdens(states, n_states, coupling, pen_of, cls_of, present,
                      init, emis, trans, logtrans):
    n_chains, n_steps = states.shape
    n_pens = trans.shape[0]
    icnt = np.zeros((n_pens, 2), np.int64)
    total = 0.0
    for t in range(n_steps):
        for p in range(n_pens):
            icnt[p, 0] = 0
            icnt[p, 1] = 0
        for k in range(n_chains):
            if present[k, t] and states[k, t] == coupling:
                icnt[pen_of[k], cls_of[k]] += 1
        for k in range(n_chains):
            s0 = states[k, t]
            if t == 0:
                v = init[k, s0]
                if v <= 0.0:
                    return -np.inf
                total += np.log(v)
            e = emis[k, t, s0]
            if e <= 0.0:
                return -np.inf
            if e != 1.0:
                total += np.log(e)
            if t < n_steps - 1:
                s1 = states[k, t + 1]
                if not present[k, t + 1]:
                    if s1 != s0:
                        return -np.inf
                else:
                    pen = pen_of[k]
                    b0 = icnt[pen, 0]
                    b1 = icnt[pen, 1]
                    if present[k, t] and s0 == coupling:
                        if cls_of[k] == 0:
                            b0 -= 1
                        else:
                            b1 -= 1
                    lv = logtrans[pen, cls_of[k], b0, b1, s0, s1]
                    if lv == -np.inf:
                        return -np.inf
                    total += lv
    return total


# ---------------------------------------------------------------------------
# single-chain modified forward pass / backward sampling (IFFBS building blocks)
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _chain_forward(k, states, icnt, mall, n_states, coupling, pen_of, cls_of,
                   present, init, emis, trans, logtrans,
                   filtered, trans_used, pred, logq):
    """Forward pass for chain k conditioned on every other chain of `states`.

    Chain k's own contribution to the counts is subtracted, so the grid may
    hold stale values for it.  Fills ``filtered`` (normalized, (T,S)),
    ``trans_used`` ((T,S,S), step t -> t+1 matrices), ``pred`` and ``logq``.
    Returns 0 on success, 1 when some step has no support.
    """
    n_steps = states.shape[1]
    pen = pen_of[k]
    ck = cls_of[k]
    for t in range(n_steps):
        b0 = icnt[pen, 0, t]
        b1 = icnt[pen, 1, t]
        if present[k, t] and states[k, t] == coupling:
            if ck == 0:
                b0 -= 1
            else:
                b1 -= 1
        if t == 0:
            for s in range(n_states):
                pred[0, s] = init[k, s]
        else:
            for s in range(n_states):
                acc = 0.0
                for f in range(n_states):
                    acc += trans_used[t - 1, f, s] * filtered[t - 1, f]
                pred[t, s] = acc
        if t < n_steps - 1:
            ks_from = -1
            ks_to = -1
            if present[k, t] and present[k, t + 1]:
                ks_from = states[k, t]
                ks_to = states[k, t + 1]
            for s in range(n_states):
                h0 = b0
                h1 = b1
                if present[k, t] and s == coupling:
                    if ck == 0:
                        h0 += 1
                    else:
                        h1 += 1
                acc = 0.0
                for c in range(2):
                    for f in range(n_states):
                        for g in range(n_states):
                            m = mall[pen, c, t, f, g]
                            if c == ck and f == ks_from and g == ks_to:
                                m -= 1
                            if m > 0:
                                acc += m * logtrans[pen, c, h0, h1, f, g]
                logq[t, s] = acc
            if present[k, t + 1]:
                for f in range(n_states):
                    for s in range(n_states):
                        trans_used[t, f, s] = trans[pen, ck, b0, b1, f, s]
            else:
                for f in range(n_states):
                    for s in range(n_states):
                        trans_used[t, f, s] = 1.0 if f == s else 0.0
        else:
            for s in range(n_states):
                logq[t, s] = 0.0
        mx = -np.inf
        for s in range(n_states):
            if logq[t, s] > mx:
                mx = logq[t, s]
        norm = 0.0
        if mx > -np.inf:
            for s in range(n_states):
                v = emis[k, t, s] * pred[t, s]
                if v > 0.0 and logq[t, s] > -np.inf:
                    v *= np.exp(logq[t, s] - mx)
                else:
                    v = 0.0
                filtered[t, s] = v
                norm += v
        if norm <= 0.0:
            return 1
        inv = 1.0 / norm
        for s in range(n_states):
            filtered[t, s] *= inv
    return 0


@njit(cache=True, nogil=True)
def _chain_backward(filtered, trans_used, rng, path, row):
    """Backward-sample a path from the modified forward quantities.

    Returns the exact log density of the sampled path under the chain's
    full conditional.
    """
    n_steps, n_states = filtered.shape
    u = _u01(rng)
    s = _sample_row(filtered[n_steps - 1], 1.0, u)
    path[n_steps - 1] = s
    logdens = np.log(filtered[n_steps - 1, s])
    for t in range(n_steps - 2, -1, -1):
        norm = 0.0
        nxt = path[t + 1]
        for f in range(n_states):
            v = filtered[t, f] * trans_used[t, f, nxt]
            row[f] = v
            norm += v
        u = _u01(rng)
        s = _sample_row(row, norm, u)
        path[t] = s
        logdens += np.log(row[s] / norm)
    return logdens


@njit(cache=True, nogil=True)
def _iffbs_update(k, states, icnt, mall, n_states, coupling, pen_of, cls_of,
                  present, init, emis, trans, logtrans,
                  filtered, trans_used, pred, logq, row, path, rng):
    """One Gibbs update of chain k in place.  Returns (log density, status)."""
    status = _chain_forward(k, states, icnt, mall, n_states, coupling, pen_of,
                            cls_of, present, init, emis, trans, logtrans,
                            filtered, trans_used, pred, logq)
    if status != 0:
        return 0.0, status
    logdens = _chain_backward(filtered, trans_used, rng, path, row)
    _apply_chain_path(k, states, icnt, mall, path, coupling, pen_of, cls_of, present)
    return logdens, 0


@njit(cache=True, nogil=True)
def _iffbs_sweep(states, icnt, mall, n_states, coupling, pen_of, cls_of,
                 present, init, emis, trans, logtrans, k_lo, k_hi, rng):
    """Sweep chains [k_lo, k_hi); returns (sum of chain log densities, status)."""
    n_steps = states.shape[1]
    filtered = np.empty((n_steps, n_states))
    trans_used = np.empty((n_steps, n_states, n_states))
    pred = np.empty((n_steps, n_states))
    logq = np.empty((n_steps, n_states))
    row = np.empty(n_states)
    path = np.empty(n_steps, np.int8)
    total = 0.0
    for k in range(k_lo, k_hi):
        ld, status = _iffbs_update(k, states, icnt, mall, n_states, coupling,
                                   pen_of, cls_of, present, init, emis, trans,
                                   logtrans, filtered, trans_used, pred, logq,
                                   row, path, rng)
        if status != 0:
            return 0.0, status
        total += ld
    return total, 0


@njit(cache=True, nogil=True)
def _collect_guiding(states, icnt, mall, n_states, coupling, pen_of, cls_of,
                     present, init, emis, trans, logtrans,
                     k_lo, n_burn, ens, rng):
    """Run burn-in sweeps then one sweep per collected sample.

    Sweeps cover chains [k_lo, K) only; chains below k_lo stay fixed.  The
    working grid `states` is mutated; `ens` receives full (K, T) snapshots.
    """
    n_samples = ens.shape[0]
    for b in range(n_burn):
        ld, status = _iffbs_sweep(states, icnt, mall, n_states, coupling,
                                  pen_of, cls_of, present, init, emis, trans,
                                  logtrans, k_lo, states.shape[0], rng)
        if status != 0:
            return status
    for n in range(n_samples):
        ld, status = _iffbs_sweep(states, icnt, mall, n_states, coupling,
                                  pen_of, cls_of, present, init, emis, trans,
                                  logtrans, k_lo, states.shape[0], rng)
        if status != 0:
            return status
        ens[n, :, :] = states
    return 0


# ---------------------------------------------------------------------------
# MIFFBS proposal
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _ess_of(w):
    tot = 0.0
    tot2 = 0.0
    for n in range(w.shape[0]):
        tot += w[n]
        tot2 += w[n] * w[n]
    if tot2 <= 0.0:
        return 0.0
    return (tot * tot) / tot2


@njit(cache=True, nogil=True)
def _regen_ensemble(ens, icnt_n, mall_n, n_states, coupling, pen_of, cls_of,
                    present, init, emis, trans, logtrans, k_lo, start_idx,
                    n_refresh, rng):
    """Rebuild the ensemble over chains [k_lo, K) conditioned on the prefix.

    The prefix rows (chains < k_lo) are identical across members and are
    never touched.  Starts the sampler from member `start_idx`.
    """
    n_samples = ens.shape[0]
    grid = ens[start_idx].copy()
    icnt = np.zeros_like(icnt_n[0])
    mall = np.zeros_like(mall_n[0])
    _build_counts(grid, coupling, pen_of, cls_of, present, icnt, mall)
    status = _collect_guiding(grid, icnt, mall, n_states, coupling, pen_of,
                              cls_of, present, init, emis, trans, logtrans,
                              k_lo, n_refresh, ens, rng)
    if status != 0:
        return status
    for n in range(n_samples):
        _build_counts(ens[n], coupling, pen_of, cls_of, present,
                      icnt_n[n], mall_n[n])
    return 0


@njit(cache=True, nogil=True)
def _miffbs_draw(ens, n_states, coupling, pen_of, cls_of, present, init, emis,
                 trans, logtrans, regen_threshold, n_refresh, rng, out_path):
    """Draw one trajectory by numerically marginalizing the guiding ensemble.

    `ens` is a working copy (it is mutated: proposed chains overwrite every
    member, and regeneration rebuilds suffixes).  Returns
    (log proposal density, status, regen count, min ESS seen);
    status 0 = ok, 1 = support failure after a forced regeneration.
    """
    n_samples, n_chains, n_steps = ens.shape
    n_pens = trans.shape[0]
    icnt_n = np.zeros((n_samples, n_pens, 2, n_steps), np.int32)
    mall_n = np.zeros((n_samples, n_pens, 2, max(n_steps - 1, 1), n_states, n_states),
                      np.int32)
    for n in range(n_samples):
        _build_counts(ens[n], coupling, pen_of, cls_of, present,
                      icnt_n[n], mall_n[n])
    w = np.full(n_samples, 1.0 / n_samples)
    filtered_n = np.empty((n_samples, n_steps, n_states))
    trans_n = np.empty((n_samples, n_steps, n_states, n_states))
    pred = np.empty((n_steps, n_states))
    logq_scratch = np.empty((n_steps, n_states))
    rrow = np.empty(n_states)
    brow = np.empty((n_samples, n_states))
    row = np.empty(n_states)
    path_k = np.empty(n_steps, np.int8)
    logq = 0.0
    n_regen = 0
    min_ess = float(n_samples)
    forced_used = False

    k = 0
    while k < n_chains:
        e = _ess_of(w)
        if e < min_ess:
            min_ess = e
        if e < regen_threshold:
            start = 0
            best = -1.0
            for n in range(n_samples):
                if w[n] > best:
                    best = w[n]
                    start = n
            status = _regen_ensemble(ens, icnt_n, mall_n, n_states, coupling,
                                     pen_of, cls_of, present, init, emis,
                                     trans, logtrans, k, start, n_refresh, rng)
            if status != 0:
                return 0.0, 1, n_regen, min_ess
            w[:] = 1.0 / n_samples
            n_regen += 1

        if k == n_chains - 1:
            # every member now shares the same conditioning: one exact
            # full-conditional draw suffices
            status = _chain_forward(k, ens[0], icnt_n[0], mall_n[0], n_states,
                                    coupling, pen_of, cls_of, present, init,
                                    emis, trans, logtrans, filtered_n[0],
                                    trans_n[0], pred, logq_scratch)
            chain_ok = status == 0
            if chain_ok:
                logq_k = _chain_backward(filtered_n[0], trans_n[0], rng, path_k, row)
        else:
            chain_ok, logq_k = _miffbs_chain(k, ens, icnt_n, mall_n, w,
                                             n_states, coupling, pen_of,
                                             cls_of, present, init, emis,
                                             trans, logtrans, filtered_n,
                                             trans_n, pred, logq_scratch,
                                             rrow, brow, path_k, rng)
        if not chain_ok:
            if forced_used:
                return 0.0, 1, n_regen, min_ess
            forced_used = True
            start = 0
            best = -1.0
            for n in range(n_samples):
                if w[n] > best:
                    best = w[n]
                    start = n
            status = _regen_ensemble(ens, icnt_n, mall_n, n_states, coupling,
                                     pen_of, cls_of, present, init, emis,
                                     trans, logtrans, k, start, n_refresh, rng)
            if status != 0:
                return 0.0, 1, n_regen, min_ess
            w[:] = 1.0 / n_samples
            n_regen += 1
            continue  # retry chain k against the fresh ensemble

        for t in range(n_steps):
            out_path[k, t] = path_k[t]
        for n in range(n_samples):
            _apply_chain_path(k, ens[n], icnt_n[n], mall_n[n], path_k,
                              coupling, pen_of, cls_of, present)
        logq += logq_k
        k += 1
    return logq, 0, n_regen, min_ess


@njit(cache=True, nogil=True)
def _miffbs_chain(k, ens, icnt_n, mall_n, w, n_states, coupling, pen_of,
                  cls_of, present, init, emis, trans, logtrans, filtered_n,
                  trans_n, pred, logq_scratch, rrow, brow, path_k, rng):
    """Propose chain k from the weighted mixture of member conditionals.

    Mutates the weights `w`.  Returns (ok, log density of the sampled
    chain under the mixture proposal).
    """
    n_samples, _, n_steps = ens.shape
    for n in range(n_samples):
        if w[n] <= 0.0:
            filtered_n[n, :, :] = 0.0
            continue
        status = _chain_forward(k, ens[n], icnt_n[n], mall_n[n], n_states,
                                coupling, pen_of, cls_of, present, init, emis,
                                trans, logtrans, filtered_n[n], trans_n[n],
                                pred, logq_scratch)
        if status != 0:
            # this member assigns zero likelihood to the conditioning
            w[n] = 0.0
            filtered_n[n, :, :] = 0.0
    logq_k = 0.0
    # terminal step
    norm = 0.0
    for s in range(n_states):
        acc = 0.0
        for n in range(n_samples):
            acc += w[n] * filtered_n[n, n_steps - 1, s]
        rrow[s] = acc
        norm += acc
    if norm <= 0.0:
        return False, 0.0
    u = _u01(rng)
    s_t = _sample_row(rrow, norm, u)
    path_k[n_steps - 1] = s_t
    logq_k += np.log(rrow[s_t] / norm)
    wsum = 0.0
    for n in range(n_samples):
        w[n] *= filtered_n[n, n_steps - 1, s_t]
        wsum += w[n]
    if wsum <= 0.0:
        return False, 0.0
    for n in range(n_samples):
        w[n] /= wsum
    # backward recursion
    for t in range(n_steps - 2, -1, -1):
        nxt = path_k[t + 1]
        for s in range(n_states):
            rrow[s] = 0.0
        for n in range(n_samples):
            if w[n] <= 0.0:
                for s in range(n_states):
                    brow[n, s] = 0.0
                continue
            d = 0.0
            for s in range(n_states):
                d += filtered_n[n, t, s] * trans_n[n, t, s, nxt]
            if d <= 0.0:
                w[n] = 0.0
                for s in range(n_states):
                    brow[n, s] = 0.0
                continue
            for s in range(n_states):
                b = filtered_n[n, t, s] * trans_n[n, t, s, nxt] / d
                brow[n, s] = b
                rrow[s] += w[n] * b
        norm = 0.0
        for s in range(n_states):
            norm += rrow[s]
        if norm <= 0.0:
            return False, 0.0
        u = _u01(rng)
        s_t = _sample_row(rrow, norm, u)
        path_k[t] = s_t
        logq_k += np.log(rrow[s_t] / norm)
        wsum = 0.0
        for n in range(n_samples):
            w[n] *= brow[n, s_t]
            wsum += w[n]
        if wsum <= 0.0:
            return False, 0.0
        for n in range(n_samples):
            w[n] /= wsum
    return True, logq_k


# ---------------------------------------------------------------------------
# exact joint filter over one pen
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _pen_filter(lo, hi, n_states, coupling, pen_of, cls_of, present, init,
                emis, trans, alpha):
    """Joint forward filter over the product space of chains [lo, hi).

    `alpha` is (T, S**m) and receives the normalized filtering
    distributions.  Returns the log marginal likelihood of the pen (or
    -inf on zero-likelihood data).
    """
    m = hi - lo
    n_steps = present.shape[1]
    n_joint = alpha.shape[1]
    pen = pen_of[lo]
    digits = np.empty(m, np.int64)
    rows = np.empty((m, n_states))
    buf_a = np.empty(n_joint)
    buf_b = np.empty(n_joint)

    width = 1
    buf_a[0] = 1.0
    use_a = True
    for i in range(m):
        k = lo + i
        src = buf_a if use_a else buf_b
        dst = buf_b if use_a else buf_a
        for j in range(width):
            v = src[j]
            base = j * n_states
            for s in range(n_states):
                dst[base + s] = v * init[k, s] * emis[k, 0, s]
        use_a = not use_a
        width *= n_states
    final = buf_a if use_a else buf_b
    c = 0.0
    for j in range(n_joint):
        c += final[j]
    if c <= 0.0:
        return -np.inf
    loglik = np.log(c)
    inv = 1.0 / c
    for j in range(n_joint):
        alpha[0, j] = final[j] * inv

    for t in range(n_steps - 1):
        for j in range(n_joint):
            alpha[t + 1, j] = 0.0
        for src_j in range(n_joint):
            a = alpha[t, src_j]
            if a <= 0.0:
                continue
            r = src_j
            for i in range(m - 1, -1, -1):
                digits[i] = r % n_states
                r //= n_states
            c0 = 0
            c1 = 0
            for i in range(m):
                k = lo + i
                if present[k, t] and digits[i] == coupling:
                    if cls_of[k] == 0:
                        c0 += 1
                    else:
                        c1 += 1
            for i in range(m):
                k = lo + i
                f = digits[i]
                if present[k, t + 1]:
                    b0 = c0
                    b1 = c1
                    if present[k, t] and f == coupling:
                        if cls_of[k] == 0:
                            b0 -= 1
                        else:
                            b1 -= 1
                    for s in range(n_states):
                        rows[i, s] = trans[pen, cls_of[k], b0, b1, f, s] * emis[k, t + 1, s]
                else:
                    for s in range(n_states):
                        rows[i, s] = emis[k, t + 1, s] if s == f else 0.0
            width = 1
            buf_a[0] = a
            use_a = True
            for i in range(m):
                src = buf_a if use_a else buf_b
                dst = buf_b if use_a else buf_a
                for j in range(width):
                    v = src[j]
                    base = j * n_states
                    for s in range(n_states):
                        dst[base + s] = v * rows[i, s]
                use_a = not use_a
                width *= n_states
            final = buf_a if use_a else buf_b
            for j in range(n_joint):
                alpha[t + 1, j] += final[j]
        c = 0.0
        for j in range(n_joint):
            c += alpha[t + 1, j]
        if c <= 0.0:
            return -np.inf
        loglik += np.log(c)
        inv = 1.0 / c
        for j in range(n_joint):
            alpha[t + 1, j] *= inv
    return loglik


@njit(cache=True, nogil=True)
def _pen_joint_trans(lo, hi, n_states, coupling, pen_of, cls_of, present,
                     trans, t, src_j, digits, dst_digits):
    """Joint transition probability between two decoded joint states."""
    m = hi - lo
    pen = pen_of[lo]
    c0 = 0
    c1 = 0
    for i in range(m):
        k = lo + i
        if present[k, t] and digits[i] == coupling:
            if cls_of[k] == 0:
                c0 += 1
            else:
                c1 += 1
    prob = 1.0
    for i in range(m):
        k = lo + i
        f = digits[i]
        g = dst_digits[i]
        if present[k, t + 1]:
            b0 = c0
            b1 = c1
            if present[k, t] and f == coupling:
                if cls_of[k] == 0:
                    b0 -= 1
                else:
                    b1 -= 1
            prob *= trans[pen, cls_of[k], b0, b1, f, g]
        else:
            if g != f:
                return 0.0
        if prob == 0.0:
            return 0.0
    return prob


@njit(cache=True, nogil=True)
def _pen_backward_sample(lo, hi, n_states, coupling, pen_of, cls_of, present,
                         trans, alpha, rng, out_states):
    """Exact joint draw given the stored filter; returns its log density."""
    m = hi - lo
    n_steps, n_joint = alpha.shape
    digits = np.empty(m, np.int64)
    dst_digits = np.empty(m, np.int64)
    probs = np.empty(n_joint)
    u = _u01(rng)
    j_next = _sample_row(alpha[n_steps - 1], 1.0, u)
    logdens = np.log(alpha[n_steps - 1, j_next])
    r = j_next
    for i in range(m - 1, -1, -1):
        out_states[i, n_steps - 1] = r % n_states
        r //= n_states
    for t in range(n_steps - 2, -1, -1):
        r = j_next
        for i in range(m - 1, -1, -1):
            dst_digits[i] = r % n_states
            r //= n_states
        norm = 0.0
        for j in range(n_joint):
            a = alpha[t, j]
            if a <= 0.0:
                probs[j] = 0.0
                continue
            r = j
            for i in range(m - 1, -1, -1):
                digits[i] = r % n_states
                r //= n_states
            p = _pen_joint_trans(lo, hi, n_states, coupling, pen_of, cls_of,
                                 present, trans, t, j, digits, dst_digits)
            probs[j] = a * p
            norm += probs[j]
        u = _u01(rng)
        j_next = _sample_row(probs, norm, u)
        logdens += np.log(probs[j_next] / norm)
        r = j_next
        for i in range(m - 1, -1, -1):
            out_states[i, t] = r % n_states
            r //= n_states
    return logdens


@njit(cache=True, nogil=True)
def _pen_smooth(lo, hi, n_states, coupling, pen_of, cls_of, present, trans,
                alpha, smooth):
    """Exact joint smoothing distributions from the stored filter."""
    m = hi - lo
    n_steps, n_joint = alpha.shape
    digits = np.empty(m, np.int64)
    rows = np.empty((m, n_states))
    buf_a = np.empty(n_joint)
    buf_b = np.empty(n_joint)
    pred = np.empty(n_joint)
    ratio = np.empty(n_joint)
    pen = pen_of[lo]
    for j in range(n_joint):
        smooth[n_steps - 1, j] = alpha[n_steps - 1, j]
    for t in range(n_steps - 2, -1, -1):
        # one-step predictive (no emission: it cancels in the ratio)
        for j in range(n_joint):
            pred[j] = 0.0
        for src_j in range(n_joint):
            a = alpha[t, src_j]
            if a <= 0.0:
                continue
            r = src_j
            for i in range(m - 1, -1, -1):
                digits[i] = r % n_states
                r //= n_states
            c0 = 0
            c1 = 0
            for i in range(m):
                k = lo + i
                if present[k, t] and digits[i] == coupling:
                    if cls_of[k] == 0:
                        c0 += 1
                    else:
                        c1 += 1
            for i in range(m):
                k = lo + i
                f = digits[i]
                if present[k, t + 1]:
                    b0 = c0
                    b1 = c1
                    if present[k, t] and f == coupling:
                        if cls_of[k] == 0:
                            b0 -= 1
                        else:
                            b1 -= 1
                    for s in range(n_states):
                        rows[i, s] = trans[pen, cls_of[k], b0, b1, f, s]
                else:
                    for s in range(n_states):
                        rows[i, s] = 1.0 if s == f else 0.0
            width = 1
            buf_a[0] = a
            use_a = True
            for i in range(m):
                srcb = buf_a if use_a else buf_b
                dstb = buf_b if use_a else buf_a
                for j in range(width):
                    v = srcb[j]
                    base = j * n_states
                    for s in range(n_states):
                        dstb[base + s] = v * rows[i, s]
                use_a = not use_a
                width *= n_states
            final = buf_a if use_a else buf_b
            for j in range(n_joint):
                pred[j] += final[j]
        for j in range(n_joint):
            if pred[j] > 0.0:
                ratio[j] = smooth[t + 1, j] / pred[j]
            else:
                ratio[j] = 0.0
        # second pass: fold the ratio back through the transition
        for src_j in range(n_joint):
            a = alpha[t, src_j]
            if a <= 0.0:
                smooth[t, src_j] = 0.0
                continue
            r = src_j
            for i in range(m - 1, -1, -1):
                digits[i] = r % n_states
                r //= n_states
            c0 = 0
            c1 = 0
            for i in range(m):
                k = lo + i
                if present[k, t] and digits[i] == coupling:
                    if cls_of[k] == 0:
                        c0 += 1
                    else:
                        c1 += 1
            for i in range(m):
                k = lo + i
                f = digits[i]
                if present[k, t + 1]:
                    b0 = c0
                    b1 = c1
                    if present[k, t] and f == coupling:
                        if cls_of[k] == 0:
                            b0 -= 1
                        else:
                            b1 -= 1
                    for s in range(n_states):
                        rows[i, s] = trans[pen, cls_of[k], b0, b1, f, s]
                else:
                    for s in range(n_states):
                        rows[i, s] = 1.0 if s == f else 0.0
            width = 1
            buf_a[0] = 1.0
            use_a = True
            for i in range(m):
                srcb = buf_a if use_a else buf_b
                dstb = buf_b if use_a else buf_a
                for j in range(width):
                    v = srcb[j]
                    base = j * n_states
                    for s in range(n_states):
                        dstb[base + s] = v * rows[i, s]
                use_a = not use_a
                width *= n_states
            final = buf_a if use_a else buf_b
            acc = 0.0
            for j in range(n_joint):
                acc += final[j] * ratio[j]
            smooth[t, src_j] = a * acc
    return 0


# ---------------------------------------------------------------------------
# bootstrap particle filter with one-step lookahead on pinned observations
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _systematic_resample(weights, u0, out_idx):
    n = weights.shape[0]
    total = 0.0
    for i in range(n):
        total += weights[i]
    step = total / n
    target = u0 * step
    acc = 0.0
    i = 0
    for p in range(n):
        while acc + weights[i] < target and i < n - 1:
            acc += weights[i]
            i += 1
        out_idx[p] = i
        target += step


@njit(cache=True, nogil=True)
def _pf_loglik(n_particles, n_states, coupling, pen_of, cls_of, present, init,
               emis, trans, lookahead, rng):
    """Sequential importance resampling estimate of the log likelihood.

    `lookahead[k, t]` marks observations that pin a strict state subset
    (deaths and moribund extractions); there the per-chain proposal is the
    transition row restricted to the supported states, with the restriction
    mass folded into the weight.  Systematic resampling runs every step.
    Returns (estimate, 1 if the particle system degenerated to zero mass).
    """
    n_chains, n_steps = present.shape
    n_pens = trans.shape[0]
    x = np.empty((n_particles, n_chains), np.int8)
    x_new = np.empty((n_particles, n_chains), np.int8)
    logw = np.empty(n_particles)
    wlin = np.empty(n_particles)
    idx = np.empty(n_particles, np.int64)
    row = np.empty(n_states)
    icnt = np.zeros((n_pens, 2), np.int64)

    for p in range(n_particles):
        lw = 0.0
        for k in range(n_chains):
            if lookahead[k, 0]:
                z = 0.0
                for s in range(n_states):
                    row[s] = init[k, s] * emis[k, 0, s]
                    z += row[s]
                if z <= 0.0:
                    lw = -np.inf
                    break
                u = _u01(rng)
                s1 = _sample_row(row, z, u)
                lw += np.log(z)
            else:
                u = _u01(rng)
                s1 = _sample_row(init[k], 1.0, u)
                e = emis[k, 0, s1]
                if e <= 0.0:
                    lw = -np.inf
                    break
                if e != 1.0:
                    lw += np.log(e)
            x[p, k] = s1
        logw[p] = lw
    loglik = _logmeanexp(logw)
    if loglik == -np.inf:
        return -np.inf, 1

    for t in range(1, n_steps):
        mx = -np.inf
        for p in range(n_particles):
            if logw[p] > mx:
                mx = logw[p]
        for p in range(n_particles):
            wlin[p] = np.exp(logw[p] - mx)
        u0 = _u01(rng)
        _systematic_resample(wlin, u0, idx)
        for p in range(n_particles):
            for k in range(n_chains):
                x_new[p, k] = x[idx[p], k]
        tmp = x
        x = x_new
        x_new = tmp

        for p in range(n_particles):
            for pp in range(n_pens):
                icnt[pp, 0] = 0
                icnt[pp, 1] = 0
            for k in range(n_chains):
                if present[k, t - 1] and x[p, k] == coupling:
                    icnt[pen_of[k], cls_of[k]] += 1
            lw = 0.0
            for k in range(n_chains):
                s0 = x[p, k]
                if not present[k, t]:
                    s1 = s0
                    e = emis[k, t, s1]
                    if e <= 0.0:
                        lw = -np.inf
                        break
                    if e != 1.0:
                        lw += np.log(e)
                else:
                    pen = pen_of[k]
                    b0 = icnt[pen, 0]
                    b1 = icnt[pen, 1]
                    if present[k, t - 1] and s0 == coupling:
                        if cls_of[k] == 0:
                            b0 -= 1
                        else:
                            b1 -= 1
                    if lookahead[k, t]:
                        z = 0.0
                        for s in range(n_states):
                            row[s] = trans[pen, cls_of[k], b0, b1, s0, s] * emis[k, t, s]
                            z += row[s]
                        if z <= 0.0:
                            lw = -np.inf
                            break
                        u = _u01(rng)
                        s1 = _sample_row(row, z, u)
                        lw += np.log(z)
                    else:
                        for s in range(n_states):
                            row[s] = trans[pen, cls_of[k], b0, b1, s0, s]
                        u = _u01(rng)
                        s1 = _sample_row(row, 1.0, u)
                        e = emis[k, t, s1]
                        if e <= 0.0:
                            lw = -np.inf
                            break
                        if e != 1.0:
                            lw += np.log(e)
                x[p, k] = s1
            logw[p] = lw
        step_ll = _logmeanexp(logw)
        if step_ll == -np.inf:
            return -np.inf, 1
        loglik += step_ll
    return loglik, 0
