"""Stroke ordering that minimizes pen-up travel.

Reordering a drawing's strokes (and optionally reversing individual strokes)
changes only the distance a hypothetical pen travels while lifted; ink length
is invariant. ``solve_exact`` finds the global optimum for small instances by
dynamic programming over (visited subset, last stroke, orientation);
``solve_heuristic`` handles arbitrary sizes with nearest-neighbor construction
followed by 2-opt segment reversals and per-stroke orientation flips.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import DataError
from .sketch import Drawing

MIN_LENGTH = "min_length"
RANDOM = "random"
IDENTITY = "identity"

#: largest stroke count accepted by the exact solver (n!*2^n search space)
EXACT_MAX = 10

_TIE_EPS = 1e-9


class InstanceTooLargeError(DataError):
    pass


@dataclass(frozen=True)
class Tour:
    """A visiting order plus per-stroke traversal direction.

    ``order[k]`` is the index of the stroke drawn k-th; ``flipped[k]`` says
    whether that stroke is traversed last-to-first. ``pen_up_cost`` is the sum
    of Euclidean gaps between consecutive exit and entry endpoints.
    """

    order: tuple[int, ...]
    flipped: tuple[bool, ...]
    pen_up_cost: float


def _endpoints(d: Drawing) -> tuple[np.ndarray, np.ndarray]:
    """Entry/exit coordinates as (n, 2, 2) arrays indexed [stroke, flipped]."""
    n = len(d.strokes)
    entry = np.empty((n, 2, 2))
    exit_ = np.empty((n, 2, 2))
    for j, s in enumerate(d.strokes):
        entry[j, 0] = s.first
        exit_[j, 0] = s.last
        entry[j, 1] = s.last
        exit_[j, 1] = s.first
    return entry, exit_


def _resum(entry: np.ndarray, exit_: np.ndarray,
           order: np.ndarray, flip: np.ndarray) -> float:
    if len(order) <= 1:
        return 0.0
    ex = exit_[order[:-1], flip[:-1]]
    en = entry[order[1:], flip[1:]]
    return float(np.hypot(en[:, 0] - ex[:, 0], en[:, 1] - ex[:, 1]).sum())


def tour_cost(d: Drawing, t: Tour) -> float:
    """Pen-up travel of ``t`` on ``d``; raises on an invalid permutation."""
    n = len(d.strokes)
    if len(t.order) != n or sorted(t.order) != list(range(n)):
        raise DataError(f"tour order {t.order!r} is not a permutation of 0..{n - 1}")
    if len(t.flipped) != n:
        raise DataError(f"tour flip mask has length {len(t.flipped)}, expected {n}")
    if n <= 1:
        return 0.0
    entry, exit_ = _endpoints(d)
    order = np.asarray(t.order, dtype=np.int64)
    flip = np.asarray(t.flipped, dtype=np.int64)
    return _resum(entry, exit_, order, flip)


def solve_exact(d: Drawing) -> Tour:
    """Globally optimal tour for up to ``EXACT_MAX`` strokes.

    Dynamic program over (visited subset, last stroke, orientation). Among
    cost ties the lexicographically smallest (order, flipped) is returned;
    the reconstruction exploits that reversing a path (and flipping every
    orientation) preserves its cost.
    """
    n = len(d.strokes)
    if n > EXACT_MAX:
        raise InstanceTooLargeError(
            f"{n} strokes exceeds the exact-solver limit of {EXACT_MAX}; "
            "use solve_heuristic")
    if n == 0:
        return Tour((), (), 0.0)
    if n == 1:
        return Tour((0,), (False,), 0.0)

    entry, exit_ = _endpoints(d)
    # gap[i, oi, j, oj] = distance from exit of i to entry of j
    diff = exit_[:, :, None, None, :] - entry[None, None, :, :, :]
    gap = np.hypot(diff[..., 0], diff[..., 1])

    full = (1 << n) - 1
    # f[mask, j, o]: min pen-up cost of a path over the strokes in mask that
    # *ends* at stroke j with orientation o
    f = np.full((full + 1, n, 2), np.inf)
    for j in range(n):
        f[1 << j, j, :] = 0.0
    for mask in range(1, full + 1):
        if mask & (mask - 1) == 0:
            continue
        for j in range(n):
            if not mask >> j & 1:
                continue
            prev = mask ^ (1 << j)
            cand = f[prev][:, :, None] + gap[:, :, j, :]
            f[mask, j, :] = cand.reshape(-1, 2).min(axis=0)
    best = float(f[full].min())
    eps = _TIE_EPS * max(1.0, best)

    # A path over mask *starting* at (j, o) costs f[mask, j, 1 - o] (reverse
    # the path, flip every orientation). First fix the lexicographically
    # smallest order; g[o] tracks the cheapest prefix ending in orientation o.
    remaining = full
    order: list[int] = []
    g = np.zeros(2)
    for k in range(n):
        chosen = -1
        for j in range(n):
            if not remaining >> j & 1:
                continue
            if k == 0:
                total = float(f[remaining, j, :].min())
            else:
                start = f[remaining, j, ::-1]  # start[o] = cost from (j, o)
                total = float(
                    (g[:, None] + gap[order[-1], :, j, :] + start[None, :]).min())
            if total <= best + eps:
                chosen = j
                break
        assert chosen >= 0, "no extension matches the optimal cost"
        if k > 0:
            g = (g[:, None] + gap[order[-1], :, chosen, :]).min(axis=0)
        order.append(chosen)
        remaining ^= 1 << chosen

    # then the smallest flip mask along that fixed order
    h = np.zeros((n, 2))  # h[k, o]: cheapest suffix from position k
    for k in range(n - 2, -1, -1):
        h[k] = (gap[order[k], :, order[k + 1], :] + h[k + 1][None, :]).min(axis=1)
    flips: list[int] = []
    cost = 0.0
    for k in range(n):
        for o in (0, 1):
            inc = 0.0 if k == 0 else float(gap[order[k - 1], flips[-1], order[k], o])
            if cost + inc + h[k, o] <= best + eps:
                flips.append(o)
                cost += inc
                break
        else:
            raise AssertionError("no orientation matches the optimal cost")

    order_arr = np.asarray(order, dtype=np.int64)
    flip_arr = np.asarray(flips, dtype=np.int64)
    pen_up = _resum(entry, exit_, order_arr, flip_arr)
    return Tour(tuple(order), tuple(bool(o) for o in flips), pen_up)


@njit(cache=True)
def _nn_construct(entry, exit_, sj, so, order, flip):  # pragma: no cover - jitted
    n = entry.shape[0]
    used = np.zeros(n, np.bool_)
    order[0] = sj
    flip[0] = so
    used[sj] = True
    cx, cy = exit_[sj, so, 0], exit_[sj, so, 1]
    for k in range(1, n):
        bd, bj, bo = np.inf, -1, 0
        for j in range(n):
            if used[j]:
                continue
            for o in range(2):
                dx = entry[j, o, 0] - cx
                dy = entry[j, o, 1] - cy
                d = dx * dx + dy * dy
                if d < bd:
                    bd, bj, bo = d, j, o
        order[k] = bj
        flip[k] = bo
        used[bj] = True
        cx, cy = exit_[bj, bo, 0], exit_[bj, bo, 1]


@njit(cache=True)
def _gap(entry, exit_, a, oa, b, ob):  # pragma: no cover - jitted
    return math.hypot(exit_[a, oa, 0] - entry[b, ob, 0],
                      exit_[a, oa, 1] - entry[b, ob, 1])


@njit(cache=True)
def _cost(entry, exit_, order, flip):  # pragma: no cover - jitted
    total = 0.0
    for i in range(order.shape[0] - 1):
        total += _gap(entry, exit_, order[i], flip[i],
                      order[i + 1], flip[i + 1])
    return total


@njit(cache=True)
def _stroke_knn(entry, k_nearest):  # pragma: no cover - jitted
    """k nearest strokes per stroke by closest endpoint pair (self excluded)."""
    n = entry.shape[0]
    nbr = np.empty((n, k_nearest), np.int64)
    d = np.empty(n)
    for i in range(n):
        for j in range(n):
            if j == i:
                d[j] = np.inf
                continue
            best = np.inf
            for oi in range(2):
                for oj in range(2):
                    dd = math.hypot(entry[i, oi, 0] - entry[j, oj, 0],
                                    entry[i, oi, 1] - entry[j, oj, 1])
                    if dd < best:
                        best = dd
            d[j] = best
        idx = np.argsort(d)
        for c in range(k_nearest):
            nbr[i, c] = idx[c]
    return nbr


@njit(cache=True)
def _apply_reversal(order, flip, pos, i, k):  # pragma: no cover - jitted
    lo, hi = i, k
    while lo < hi:
        order[lo], order[hi] = order[hi], order[lo]
        flip[lo], flip[hi] = flip[hi], flip[lo]
        lo += 1
        hi -= 1
    for m in range(i, k + 1):
        flip[m] = 1 - flip[m]
        pos[order[m]] = m


@njit(cache=True)
def _descent(entry, exit_, order, flip, pos, nbr, max_iters):  # pragma: no cover
    """First-improvement local search; returns the final pen-up cost.

    Moves: single-stroke orientation flip, segment reversal (orientations in
    the segment flip too, so in-segment gaps are preserved), and relocation
    of one stroke next to a nearby stroke. Reversals and relocations are
    proposed from the candidate lists in ``nbr``; with k = n-1 neighbors the
    enumeration is exhaustive. All deltas are O(1).
    """
    n = order.shape[0]
    k_nearest = nbr.shape[1]
    iters = 0
    improved = True
    while improved and iters < max_iters:
        improved = False
        # orientation flip of a single stroke
        for i in range(n):
            s, o = order[i], flip[i]
            no = 1 - o
            delta = 0.0
            if i > 0:
                delta += _gap(entry, exit_, order[i - 1], flip[i - 1], s, no) \
                    - _gap(entry, exit_, order[i - 1], flip[i - 1], s, o)
            if i < n - 1:
                delta += _gap(entry, exit_, s, no, order[i + 1], flip[i + 1]) \
                    - _gap(entry, exit_, s, o, order[i + 1], flip[i + 1])
            if delta < -1e-12:
                flip[i] = no
                improved = True
                iters += 1
                if iters >= max_iters:
                    return _cost(entry, exit_, order, flip)
        # segment reversal i..k, proposed from a short new edge on the left
        # (anchor a = i-1 joins a nearby stroke s at position k)
        for a in range(n - 1):
            sa, oa = order[a], flip[a]
            for c in range(k_nearest):
                k = pos[nbr[sa, c]]
                if k <= a:
                    continue
                i = a + 1
                si, oi = order[i], flip[i]
                sk, ok = order[k], flip[k]
                delta = _gap(entry, exit_, sa, oa, sk, 1 - ok) \
                    - _gap(entry, exit_, sa, oa, si, oi)
                if k < n - 1:
                    delta += _gap(entry, exit_, si, 1 - oi,
                                  order[k + 1], flip[k + 1]) \
                        - _gap(entry, exit_, sk, ok, order[k + 1], flip[k + 1])
                if delta < -1e-12:
                    _apply_reversal(order, flip, pos, i, k)
                    improved = True
                    iters += 1
                    if iters >= max_iters:
                        return _cost(entry, exit_, order, flip)
                    break
        # ... and from a short new edge on the right (segment i..b-1 joins
        # anchor b; covers reversals that start at position 0)
        for b in range(1, n):
            sb, ob = order[b], flip[b]
            for c in range(k_nearest):
                i = pos[nbr[sb, c]]
                if i >= b:
                    continue
                k = b - 1
                si, oi = order[i], flip[i]
                sk, ok = order[k], flip[k]
                delta = _gap(entry, exit_, si, 1 - oi, sb, ob) \
                    - _gap(entry, exit_, sk, ok, sb, ob)
                if i > 0:
                    delta += _gap(entry, exit_, order[i - 1], flip[i - 1],
                                  sk, 1 - ok) \
                        - _gap(entry, exit_, order[i - 1], flip[i - 1], si, oi)
                if delta < -1e-12:
                    _apply_reversal(order, flip, pos, i, k)
                    improved = True
                    iters += 1
                    if iters >= max_iters:
                        return _cost(entry, exit_, order, flip)
                    break
        # relocate one stroke next to a nearby stroke, either orientation
        for j in range(n):
            sj, oj = order[j], flip[j]
            if 0 < j < n - 1:
                remove = _gap(entry, exit_, order[j - 1], flip[j - 1],
                              order[j + 1], flip[j + 1]) \
                    - _gap(entry, exit_, order[j - 1], flip[j - 1], sj, oj) \
                    - _gap(entry, exit_, sj, oj, order[j + 1], flip[j + 1])
            elif j == 0:
                remove = -_gap(entry, exit_, sj, oj, order[1], flip[1])
            else:
                remove = -_gap(entry, exit_, order[n - 2], flip[n - 2], sj, oj)
            moved = False
            for c in range(k_nearest):
                p = pos[nbr[sj, c]]
                q = p if p < j else p - 1  # index of the anchor once j is out
                for t in (q, q + 1):  # slot in the final sequence
                    # final index u maps to original index u if u < j else u+1
                    left = t - 1 if t - 1 < j else t
                    right = t if t < j else t + 1
                    for o in range(2):
                        if t == j and o == oj:
                            continue
                        ins = 0.0
                        if t > 0:
                            ins += _gap(entry, exit_, order[left], flip[left],
                                        sj, o)
                        if t < n - 1:
                            ins += _gap(entry, exit_, sj, o,
                                        order[right], flip[right])
                        if 0 < t < n - 1:
                            ins -= _gap(entry, exit_, order[left], flip[left],
                                        order[right], flip[right])
                        if remove + ins < -1e-12:
                            if t < j:
                                for m in range(j, t, -1):
                                    order[m] = order[m - 1]
                                    flip[m] = flip[m - 1]
                            else:
                                for m in range(j, t):
                                    order[m] = order[m + 1]
                                    flip[m] = flip[m + 1]
                            order[t] = sj
                            flip[t] = o
                            for m in range(min(j, t), max(j, t) + 1):
                                pos[order[m]] = m
                            improved = True
                            iters += 1
                            if iters >= max_iters:
                                return _cost(entry, exit_, order, flip)
                            moved = True
                            break
                    if moved:
                        break
                if moved:
                    break
    return _cost(entry, exit_, order, flip)


@njit(cache=True)
def _search(entry, exit_, nbr, starts, cuts, kick_flips, restart_orders,
            restart_flips, restart_period, max_iters):  # pragma: no cover
    n = entry.shape[0]
    best_cost = np.inf
    best_order = np.empty(n, np.int64)
    best_flip = np.empty(n, np.int64)
    order = np.empty(n, np.int64)
    flip = np.empty(n, np.int64)
    pos = np.empty(n, np.int64)
    for s in range(starts.shape[0]):
        _nn_construct(entry, exit_, starts[s, 0], starts[s, 1], order, flip)
        for m in range(n):
            pos[order[m]] = m
        c = _descent(entry, exit_, order, flip, pos, nbr, max_iters)
        if c < best_cost:
            best_cost = c
            best_order[:] = order
            best_flip[:] = flip
    for k in range(cuts.shape[0]):
        if n >= 4 and (k + 1) % restart_period != 0:
            # double-bridge: swap the two middle blocks of the current best
            a, b, c3 = cuts[k, 0], cuts[k, 1], cuts[k, 2]
            m = 0
            for src in range(0, a):
                order[m] = best_order[src]
                flip[m] = best_flip[src]
                m += 1
            for src in range(b, c3):
                order[m] = best_order[src]
                flip[m] = best_flip[src]
                m += 1
            for src in range(a, b):
                order[m] = best_order[src]
                flip[m] = best_flip[src]
                m += 1
            for src in range(c3, n):
                order[m] = best_order[src]
                flip[m] = best_flip[src]
                m += 1
            j = kick_flips[k]
            flip[j] = 1 - flip[j]
        else:
            order[:] = restart_orders[k]
            flip[:] = restart_flips[k]
        for m in range(n):
            pos[order[m]] = m
        c = _descent(entry, exit_, order, flip, pos, nbr, max_iters)
        if c < best_cost - 1e-12:
            best_cost = c
            best_order[:] = order
            best_flip[:] = flip
    return best_cost, best_order, best_flip


def _budget(n: int) -> tuple[int, int, int]:
    """(NN starts, kicks, candidate-list size) — shrinks with n to bound time."""
    if n <= 12:
        return 2 * n, 20, n - 1
    if n <= 60:
        return 8, 10, n - 1
    return 1, 0, 10


def solve_heuristic(d: Drawing, seed: int = 0) -> Tour:
    """Nearest-neighbor construction improved by seeded local search.

    Construction starts from the stroke whose entry endpoint is closest to
    the canvas top-left (plus alternative starts on small instances);
    improvement is first-improvement 2-opt with per-stroke orientation flips
    and single-stroke relocations, diversified by seeded double-bridge kicks.
    Large instances propose moves from nearest-neighbor candidate lists to
    stay fast. The result never costs more than the identity ordering, and
    for a fixed seed the output is deterministic.
    """
    n = len(d.strokes)
    if n == 0:
        return Tour((), (), 0.0)
    if n == 1:
        return Tour((0,), (False,), 0.0)
    entry, exit_ = _endpoints(d)

    dist_tl = np.hypot(entry[:, :, 0], entry[:, :, 1])
    pinned = divmod(int(dist_tl.argmin()), 2)
    n_starts, n_kicks, k_nearest = _budget(n)
    starts = {pinned}
    if n_starts > 1:
        for j in np.linspace(0, n - 1, n_starts // 2).astype(int):
            starts.update(((int(j), 0), (int(j), 1)))
    starts = np.array(sorted(starts), dtype=np.int64)
    nbr = _stroke_knn(entry, k_nearest)

    rng = np.random.default_rng(seed)
    cuts = np.empty((n_kicks, 3), dtype=np.int64)
    for k in range(n_kicks):
        if n >= 4:
            cuts[k] = np.sort(rng.choice(np.arange(1, n), size=3,
                                         replace=False))
        else:
            cuts[k] = (1, 1, 1)
    kick_flips = rng.integers(0, n, size=n_kicks)
    restart_orders = np.empty((n_kicks, n), dtype=np.int64)
    for k in range(n_kicks):
        restart_orders[k] = rng.permutation(n)
    restart_flips = rng.integers(0, 2, size=(n_kicks, n))

    cost, order, flip = _search(entry, exit_, nbr, starts, cuts, kick_flips,
                                restart_orders, restart_flips, 3, 50 * n)
    identity_cost = _resum(entry, exit_, np.arange(n, dtype=np.int64),
                           np.zeros(n, dtype=np.int64))
    if identity_cost < cost:
        return Tour(tuple(range(n)), (False,) * n, identity_cost)
    return Tour(tuple(int(i) for i in order),
                tuple(bool(v) for v in flip), float(cost))


def apply_tour(d: Drawing, t: Tour) -> Drawing:
    strokes = [d.strokes[i].reversed() if fl else d.strokes[i]
               for i, fl in zip(t.order, t.flipped)]
    return d.with_strokes(strokes)


def reorder(d: Drawing, method: str, seed: int = 0,
            exact_max: int = EXACT_MAX) -> Drawing:
    """Permute (and orient) strokes per ``method``; canvas and labels kept.

    ``min_length`` uses the exact solver up to ``exact_max`` strokes and the
    heuristic beyond; ``random`` draws a permutation from ``seed``;
    ``identity`` returns the drawing unchanged.
    """
    if method == IDENTITY:
        return d
    if method == RANDOM:
        rng = np.random.default_rng(seed)
        perm = rng.permutation(len(d.strokes))
        return d.with_strokes([d.strokes[i] for i in perm])
    if method == MIN_LENGTH:
        if len(d.strokes) <= exact_max:
            t = solve_exact(d)
        else:
            t = solve_heuristic(d, seed)
        return apply_tour(d, t)
    raise DataError(f"unknown order method {method!r}")
