"""Hot kernel for bounded simple-path enumeration.

The search runs breadth-first over the CSR adjacency so emitted paths come
out shortest-first and in neighbor order, which makes cap truncation a
deterministic prefix. The kernel is integer-only, so the numba and pure
Python implementations produce identical output.

Set KGCF_NO_NUMBA=1 to force the pure Python fallback (also used when
numba is not importable).
"""

from __future__ import annotations

import os

import numpy as np

_NO_NUMBA = os.environ.get("KGCF_NO_NUMBA", "") not in ("", "0")


def _enum_paths_py(indptr, adj_rel, adj_nbr, n_rel, source, target, max_len, ex_h, ex_r, ex_t, cap):
    """Reference implementation; returns (flat edge ids, path offsets)."""
    if source == target:
        return np.empty(0, dtype=np.int64), np.zeros(1, dtype=np.int64)
    # Queue entries: (node, depth, parent queue index, CSR edge index used).
    q_node = [source]
    q_depth = [0]
    q_parent = [-1]
    q_edge = [-1]
    flat: list[int] = []
    offsets = [0]
    n_found = 0
    head = 0
    while head < len(q_node) and n_found < cap:
        u = q_node[head]
        depth = q_depth[head]
        for k in range(indptr[u], indptr[u + 1]):
            enc = adj_rel[k]
            v = adj_nbr[k]
            if enc < n_rel:
                th, tr, tt = u, enc, v
            else:
                th, tr, tt = v, enc - n_rel, u
            if th == ex_h and tr == ex_r and tt == ex_t:
                continue
            if v == target:
                p = head
                chain = [k]
                while q_parent[p] >= 0:
                    chain.append(q_edge[p])
                    p = q_parent[p]
                flat.extend(reversed(chain))
                offsets.append(len(flat))
                n_found += 1
                if n_found >= cap:
                    break
                continue
            if depth + 1 >= max_len:
                continue
            # Simplicity: v must not appear anywhere on the chain.
            p = head
            seen = v == u or v == source
            while not seen and q_parent[p] >= 0:
                p = q_parent[p]
                if q_node[p] == v:
                    seen = True
            if seen:
                continue
            q_node.append(v)
            q_depth.append(depth + 1)
            q_parent.append(head)
            q_edge.append(k)
        head += 1
    return np.array(flat, dtype=np.int64), np.array(offsets, dtype=np.int64)


def _enum_paths_impl(indptr, adj_rel, adj_nbr, n_rel, source, target, max_len, ex_h, ex_r, ex_t, cap):
    # Mirrors _enum_paths_py with preallocated, doubling arrays (njit-able).
    flat = np.empty(256, dtype=np.int64)
    offsets = np.empty(64, dtype=np.int64)
    offsets[0] = 0
    n_flat = 0
    n_off = 1
    if source == target:
        return flat[:0], offsets[:1]
    q_cap = 256
    q_node = np.empty(q_cap, dtype=np.int64)
    q_depth = np.empty(q_cap, dtype=np.int64)
    q_parent = np.empty(q_cap, dtype=np.int64)
    q_edge = np.empty(q_cap, dtype=np.int64)
    q_node[0] = source
    q_depth[0] = 0
    q_parent[0] = -1
    q_edge[0] = -1
    q_len = 1
    chain = np.empty(max_len, dtype=np.int64)
    n_found = 0
    head = 0
    while head < q_len and n_found < cap:
        u = q_node[head]
        depth = q_depth[head]
        for k in range(indptr[u], indptr[u + 1]):
            enc = adj_rel[k]
            v = adj_nbr[k]
            if enc < n_rel:
                th, tr, tt = u, enc, v
            else:
                th, tr, tt = v, enc - n_rel, u
            if th == ex_h and tr == ex_r and tt == ex_t:
                continue
            if v == target:
                chain[0] = k
                c_len = 1
                p = head
                while q_parent[p] >= 0:
                    chain[c_len] = q_edge[p]
                    c_len += 1
                    p = q_parent[p]
                while n_flat + c_len > flat.shape[0]:
                    grown = np.empty(flat.shape[0] * 2, dtype=np.int64)
                    grown[:n_flat] = flat[:n_flat]
                    flat = grown
                for i in range(c_len):
                    flat[n_flat + i] = chain[c_len - 1 - i]
                n_flat += c_len
                if n_off >= offsets.shape[0]:
                    grown = np.empty(offsets.shape[0] * 2, dtype=np.int64)
                    grown[:n_off] = offsets[:n_off]
                    offsets = grown
                offsets[n_off] = n_flat
                n_off += 1
                n_found += 1
                if n_found >= cap:
                    break
                continue
            if depth + 1 >= max_len:
                continue
            seen = v == u or v == source
            p = head
            while not seen and q_parent[p] >= 0:
                p = q_parent[p]
                if q_node[p] == v:
                    seen = True
            if seen:
                continue
            if q_len >= q_cap:
                q_cap *= 2
                new_node = np.empty(q_cap, dtype=np.int64)
                new_depth = np.empty(q_cap, dtype=np.int64)
                new_parent = np.empty(q_cap, dtype=np.int64)
                new_edge = np.empty(q_cap, dtype=np.int64)
                new_node[:q_len] = q_node[:q_len]
                new_depth[:q_len] = q_depth[:q_len]
                new_parent[:q_len] = q_parent[:q_len]
                new_edge[:q_len] = q_edge[:q_len]
                q_node = new_node
                q_depth = new_depth
                q_parent = new_parent
                q_edge = new_edge
            q_node[q_len] = v
            q_depth[q_len] = depth + 1
            q_parent[q_len] = head
            q_edge[q_len] = k
            q_len += 1
        head += 1
    return flat[:n_flat], offsets[:n_off]


USING_NUMBA = False
if not _NO_NUMBA:
    try:
        from numba import njit

        _enum_paths_jit = njit(cache=True, nogil=True)(_enum_paths_impl)
        USING_NUMBA = True
    except ImportError:
        pass


def enumerate_path_edges(indptr, adj_rel, adj_nbr, n_rel, source, target, max_len, excluded, cap):
    """Edge-id form of path enumeration; cap=None means unbounded."""
    ex_h, ex_r, ex_t = excluded if excluded is not None else (-1, -1, -1)
    cap_v = np.iinfo(np.int64).max if cap is None else int(cap)
    if USING_NUMBA:
        return _enum_paths_jit(
            indptr,
            adj_rel,
            adj_nbr,
            np.int64(n_rel),
            np.int64(source),
            np.int64(target),
            np.int64(max_len),
            np.int64(ex_h),
            np.int64(ex_r),
            np.int64(ex_t),
            np.int64(cap_v),
        )
    return _enum_paths_py(
        indptr, adj_rel, adj_nbr, n_rel, source, target, max_len, ex_h, ex_r, ex_t, cap_v
    )
