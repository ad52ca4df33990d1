"""HNSW graph kernels.

Graph state lives in flat arrays so numba can work on it without object
overhead:

    vecs      float64 (or float32) [cap, dim]
    links0    int32   [cap, m0]       layer-0 adjacency
    cnt0      int32   [cap]
    up_slot   int32   [cap]           row into links_up, -1 for level-0 nodes
    links_up  int32   [cap_up, MAX_LEVEL, m]   adjacency for layers 1..MAX_LEVEL
    cnt_up    int32   [cap_up, MAX_LEVEL]

Similarity is the float64 dot product; the graph is built to maximize it.
A new node keeps up to ``m0 = 2M`` links on layer 0 rather than ``M``; on
high-dimensional data this buys several points of recall at ef=64.
Every public kernel exists as ``*_nb`` (numba) and ``*_np`` (numpy + heapq).
"""
from __future__ import annotations

import heapq

import numpy as np

from .._accel import njit

MAX_LEVEL = 16


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------


@njit(fastmath=True)
def _dot_nb(vecs, i, q):
    s = 0.0
    row = vecs[i]
    for t in range(row.shape[0]):
        s += np.float64(row[t]) * q[t]
    return s


@njit(fastmath=True)
def _pair_dot_nb(vecs, i, j):
    s = 0.0
    a = vecs[i]
    b = vecs[j]
    for t in range(a.shape[0]):
        s += np.float64(a[t]) * np.float64(b[t])
    return s


@njit
def _neighbors_nb(node, layer, links0, cnt0, up_slot, links_up, cnt_up):
    if layer == 0:
        return links0[node, : cnt0[node]]
    slot = up_slot[node]
    return links_up[slot, layer - 1, : cnt_up[slot, layer - 1]]


@njit
def _greedy_nb(vecs, q, ep, layer, links0, cnt0, up_slot, links_up, cnt_up):
    cur = ep
    cur_sim = _dot_nb(vecs, cur, q)
    changed = True
    while changed:
        changed = False
        nbrs = _neighbors_nb(cur, layer, links0, cnt0, up_slot, links_up, cnt_up)
        for j in range(nbrs.shape[0]):
            n = nbrs[j]
            s = _dot_nb(vecs, n, q)
            if s > cur_sim or (s == cur_sim and n < cur):
                cur_sim = s
                cur = n
                changed = True
    return cur


@njit
def _search_layer_nb(vecs, q, eps, ef, layer, links0, cnt0, up_slot, links_up, cnt_up, visited, stamp):
    # candidates: max-heap on sim via (-sim, id); results: min-heap via (sim, -id)
    cand = [(0.0, np.int64(0))]
    cand.pop()
    res = [(0.0, np.int64(0))]
    res.pop()
    for k in range(eps.shape[0]):
        e = np.int64(eps[k])
        if visited[e] == stamp:
            continue
        visited[e] = stamp
        s = _dot_nb(vecs, e, q)
        heapq.heappush(cand, (-s, e))
        heapq.heappush(res, (s, -e))
        if len(res) > ef:
            heapq.heappop(res)
    while len(cand) > 0:
        neg, c = heapq.heappop(cand)
        if len(res) >= ef and -neg < res[0][0]:
            break
        nbrs = _neighbors_nb(c, layer, links0, cnt0, up_slot, links_up, cnt_up)
        for j in range(nbrs.shape[0]):
            n = np.int64(nbrs[j])
            if visited[n] == stamp:
                continue
            visited[n] = stamp
            s = _dot_nb(vecs, n, q)
            if len(res) < ef or s > res[0][0]:
                heapq.heappush(cand, (-s, n))
                heapq.heappush(res, (s, -n))
                if len(res) > ef:
                    heapq.heappop(res)
    m = len(res)
    ids = np.empty(m, dtype=np.int64)
    sims = np.empty(m, dtype=np.float64)
    # pop ascending, fill from the back so output is best-first
    for k in range(m - 1, -1, -1):
        s, negid = heapq.heappop(res)
        ids[k] = -negid
        sims[k] = s
    return ids, sims


@njit
def _select_heuristic_nb(vecs, ids, sims, m):
    """Keep a candidate only if it is closer to the base than to any kept one.

    ``ids``/``sims`` must be sorted best-first.
    """
    out = np.empty(min(m, ids.shape[0]), dtype=np.int64)
    n_out = 0
    for k in range(ids.shape[0]):
        if n_out >= m:
            break
        e = ids[k]
        good = True
        for r in range(n_out):
            if _pair_dot_nb(vecs, e, out[r]) > sims[k]:
                good = False
                break
        if good:
            out[n_out] = e
            n_out += 1
    return out[:n_out]


@njit
def _set_links_nb(node, layer, new, links0, cnt0, up_slot, links_up, cnt_up):
    if layer == 0:
        for k in range(new.shape[0]):
            links0[node, k] = new[k]
        cnt0[node] = new.shape[0]
    else:
        slot = up_slot[node]
        for k in range(new.shape[0]):
            links_up[slot, layer - 1, k] = new[k]
        cnt_up[slot, layer - 1] = new.shape[0]


@njit
def _sort_best_first_nb(ids, sims):
    # stable ordering: sim desc, id asc
    order = np.argsort(ids, kind="mergesort")
    ids = ids[order]
    sims = sims[order]
    order = np.argsort(-sims, kind="mergesort")
    return ids[order], sims[order]


@njit
def insert_nb(vecs, node, level, entry, max_level, m, m0, ef_construction,
              links0, cnt0, up_slot, links_up, cnt_up, visited, stamp):
    """Link ``node`` (already written into ``vecs``) into the graph.

    Returns the new (entry, max_level, stamp).
    """
    if entry < 0:
        return node, level, stamp
    q = vecs[node].astype(np.float64)
    ep = entry
    for layer in range(max_level, level, -1):
        ep = _greedy_nb(vecs, q, ep, layer, links0, cnt0, up_slot, links_up, cnt_up)
    eps = np.array([ep], dtype=np.int64)
    top = min(level, max_level)
    for layer in range(top, -1, -1):
        stamp += 1
        ids, sims = _search_layer_nb(vecs, q, eps, ef_construction, layer,
                                     links0, cnt0, up_slot, links_up, cnt_up, visited, stamp)
        cap = m0 if layer == 0 else m
        chosen = _select_heuristic_nb(vecs, ids, sims, cap)
        _set_links_nb(node, layer, chosen, links0, cnt0, up_slot, links_up, cnt_up)
        for k in range(chosen.shape[0]):
            e = chosen[k]
            cur = _neighbors_nb(e, layer, links0, cnt0, up_slot, links_up, cnt_up)
            n = cur.shape[0]
            if n < cap:
                if layer == 0:
                    links0[e, n] = node
                    cnt0[e] = n + 1
                else:
                    slot = up_slot[e]
                    links_up[slot, layer - 1, n] = node
                    cnt_up[slot, layer - 1] = n + 1
                continue
            cids = np.empty(n + 1, dtype=np.int64)
            csims = np.empty(n + 1, dtype=np.float64)
            for t in range(n):
                cids[t] = cur[t]
                csims[t] = _pair_dot_nb(vecs, e, cur[t])
            cids[n] = node
            csims[n] = _pair_dot_nb(vecs, e, node)
            cids, csims = _sort_best_first_nb(cids, csims)
            kept = _select_heuristic_nb(vecs, cids, csims, cap)
            _set_links_nb(e, layer, kept, links0, cnt0, up_slot, links_up, cnt_up)
        eps = ids
    if level > max_level:
        return node, level, stamp
    return entry, max_level, stamp


@njit
def search_nb(vecs, q, ef, entry, max_level, links0, cnt0, up_slot, links_up, cnt_up, visited, stamp):
    """Return (ids, sims, stamp) for the ``ef`` best layer-0 candidates."""
    ep = entry
    for layer in range(max_level, 0, -1):
        ep = _greedy_nb(vecs, q, ep, layer, links0, cnt0, up_slot, links_up, cnt_up)
    stamp += 1
    eps = np.array([ep], dtype=np.int64)
    ids, sims = _search_layer_nb(vecs, q, eps, ef, 0, links0, cnt0, up_slot, links_up, cnt_up, visited, stamp)
    return ids, sims, stamp


# --------------------------------------------------------------------------
# numpy fallback (same algorithm, batched dot products, python heaps)
# --------------------------------------------------------------------------


def _neighbors_np(node, layer, links0, cnt0, up_slot, links_up, cnt_up):
    if layer == 0:
        return links0[node, : cnt0[node]]
    slot = up_slot[node]
    return links_up[slot, layer - 1, : cnt_up[slot, layer - 1]]


def _sims_np(vecs, ids, q):
    return vecs[ids].astype(np.float64) @ q


def _greedy_np(vecs, q, ep, layer, graph):
    cur = int(ep)
    cur_sim = float(vecs[cur].astype(np.float64) @ q)
    changed = True
    while changed:
        changed = False
        nbrs = _neighbors_np(cur, layer, *graph)
        if nbrs.size == 0:
            break
        sims = _sims_np(vecs, nbrs, q)
        for n, s in zip(nbrs.tolist(), sims.tolist()):
            if s > cur_sim or (s == cur_sim and n < cur):
                cur_sim, cur = s, n
                changed = True
    return cur


def _search_layer_np(vecs, q, eps, ef, layer, graph):
    visited = set()
    cand: list = []
    res: list = []
    eps = [int(e) for e in eps if int(e) not in visited]
    if eps:
        sims = _sims_np(vecs, np.asarray(eps), q)
        for e, s in zip(eps, sims.tolist()):
            if e in visited:
                continue
            visited.add(e)
            heapq.heappush(cand, (-s, e))
            heapq.heappush(res, (s, -e))
            if len(res) > ef:
                heapq.heappop(res)
    while cand:
        neg, c = heapq.heappop(cand)
        if len(res) >= ef and -neg < res[0][0]:
            break
        nbrs = [n for n in _neighbors_np(c, layer, *graph).tolist() if n not in visited]
        if not nbrs:
            continue
        visited.update(nbrs)
        sims = _sims_np(vecs, np.asarray(nbrs), q)
        for n, s in zip(nbrs, sims.tolist()):
            if len(res) < ef or s > res[0][0]:
                heapq.heappush(cand, (-s, n))
                heapq.heappush(res, (s, -n))
                if len(res) > ef:
                    heapq.heappop(res)
    res.sort(key=lambda t: (-t[0], -t[1]))
    ids = np.array([-t[1] for t in res], dtype=np.int64)
    sims = np.array([t[0] for t in res], dtype=np.float64)
    return ids, sims


def _select_heuristic_np(vecs, ids, sims, m):
    out: list[int] = []
    for e, s in zip(ids.tolist(), sims.tolist()):
        if len(out) >= m:
            break
        if out:
            to_kept = vecs[out].astype(np.float64) @ vecs[e].astype(np.float64)
            if np.any(to_kept > s):
                continue
        out.append(e)
    return np.array(out, dtype=np.int64)


def _set_links_np(node, layer, new, links0, cnt0, up_slot, links_up, cnt_up):
    if layer == 0:
        links0[node, : new.size] = new
        cnt0[node] = new.size
    else:
        slot = up_slot[node]
        links_up[slot, layer - 1, : new.size] = new
        cnt_up[slot, layer - 1] = new.size


def insert_np(vecs, node, level, entry, max_level, m, m0, ef_construction,
              links0, cnt0, up_slot, links_up, cnt_up, visited, stamp):
    if entry < 0:
        return node, level, stamp
    graph = (links0, cnt0, up_slot, links_up, cnt_up)
    q = vecs[node].astype(np.float64)
    ep = entry
    for layer in range(max_level, level, -1):
        ep = _greedy_np(vecs, q, ep, layer, graph)
    eps = np.array([ep], dtype=np.int64)
    for layer in range(min(level, max_level), -1, -1):
        ids, sims = _search_layer_np(vecs, q, eps, ef_construction, layer, graph)
        cap = m0 if layer == 0 else m
        chosen = _select_heuristic_np(vecs, ids, sims, cap)
        _set_links_np(node, layer, chosen, *graph)
        for e in chosen.tolist():
            cur = _neighbors_np(e, layer, *graph)
            n = cur.size
            if n < cap:
                _set_links_np(e, layer, np.append(cur, node).astype(np.int64), *graph)
                continue
            cids = np.append(cur, node).astype(np.int64)
            csims = vecs[cids].astype(np.float64) @ vecs[e].astype(np.float64)
            order = np.lexsort((cids, -csims))
            kept = _select_heuristic_np(vecs, cids[order], csims[order], cap)
            _set_links_np(e, layer, kept, *graph)
        eps = ids
    if level > max_level:
        return node, level, stamp
    return entry, max_level, stamp


def search_np(vecs, q, ef, entry, max_level, links0, cnt0, up_slot, links_up, cnt_up, visited, stamp):
    graph = (links0, cnt0, up_slot, links_up, cnt_up)
    ep = entry
    for layer in range(max_level, 0, -1):
        ep = _greedy_np(vecs, q, ep, layer, graph)
    ids, sims = _search_layer_np(vecs, q, np.array([ep]), ef, 0, graph)
    return ids, sims, stamp
