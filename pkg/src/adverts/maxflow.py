"""Max-flow / min-cut on a 4-connected pixel grid.

Augmenting-path solver in the style of Boykov-Kolmogorov: two search trees
grown from the terminals, with orphan adoption after each augmentation.
This is the hot core of interactive segmentation, so the kernel is written
over flat arrays and JIT-compiled when numba is available (pure-python
fallback otherwise; identical results).

Terminal capacities are stored net per node: ``tcap[i] > 0`` is residual
source->i capacity, ``tcap[i] < 0`` residual i->sink. This shifts the cut
value by a constant but never changes the argmin labeling.
"""

from __future__ import annotations

import numpy as np

try:  # optional accelerator; the kernel runs unmodified without it
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        if args and callable(args[0]):
            return args[0]
        return wrap


# tree labels
_FREE = 0
_SRC = 1
_SNK = 2
# parent markers
_NONE = -1
_TERMINAL = -2


@njit(cache=True)
def _bk_grid_maxflow(tcap, ncap, width, height):  # pragma: no cover - jitted
    """Solve max-flow on a width x height 4-connected grid.

    tcap: (n,) float64 net terminal capacities (modified in place)
    ncap: (n, 4) float64 directed neighbour capacities, directions
          0:+x  1:-x  2:+y  3:-y (modified in place)

    Returns (flow, labels) where labels[i] = True for source-side nodes.
    """
    n = width * height
    tree = np.zeros(n, dtype=np.int8)
    parent = np.full(n, _NONE, dtype=np.int64)
    # direction from child to parent, -1 when parent is a terminal
    pdir = np.full(n, -1, dtype=np.int8)

    # FIFO active queue with an in-queue flag (duplicates suppressed)
    queue = np.empty(n, dtype=np.int64)
    q_head = 0
    q_tail = 0
    q_len = 0
    in_queue = np.zeros(n, dtype=np.bool_)

    orphans = np.empty(n, dtype=np.int64)

    for i in range(n):
        if tcap[i] > 0.0:
            tree[i] = _SRC
            parent[i] = _TERMINAL
        elif tcap[i] < 0.0:
            tree[i] = _SNK
            parent[i] = _TERMINAL
        if tree[i] != _FREE:
            queue[q_tail] = i
            q_tail = (q_tail + 1) % n
            q_len += 1
            in_queue[i] = True

    path_s = np.empty(n, dtype=np.int64)
    path_t = np.empty(n, dtype=np.int64)

    flow = 0.0
    while True:
        # ---- grow trees until an s-tree/t-tree contact edge is found
        contact_p = -1
        contact_q = -1
        contact_d = -1
        while q_len > 0:
            p = queue[q_head]
            found = False
            if tree[p] != _FREE:
                x = p % width
                y = p // width
                for d in range(4):
                    if d == 0:
                        if x == width - 1:
                            continue
                        q = p + 1
                    elif d == 1:
                        if x == 0:
                            continue
                        q = p - 1
                    elif d == 2:
                        if y == height - 1:
                            continue
                        q = p + width
                    else:
                        if y == 0:
                            continue
                        q = p - width
                    # residual of the arc in this tree's growth direction
                    if tree[p] == _SRC:
                        res = ncap[p, d]
                    else:
                        res = ncap[q, d ^ 1]
                    if res <= 0.0:
                        continue
                    if tree[q] == _FREE:
                        tree[q] = tree[p]
                        parent[q] = p
                        pdir[q] = np.int8(d ^ 1)
                        if not in_queue[q]:
                            queue[q_tail] = q
                            q_tail = (q_tail + 1) % n
                            q_len += 1
                            in_queue[q] = True
                    elif tree[q] != tree[p]:
                        if tree[p] == _SRC:
                            contact_p = p
                            contact_q = q
                            contact_d = d
                        else:
                            contact_p = q
                            contact_q = p
                            contact_d = d ^ 1
                        found = True
                        break
            if found:
                break
            q_head = (q_head + 1) % n
            q_len -= 1
            in_queue[p] = False
        if contact_p < 0:
            break  # no augmenting path: done

        # ---- augment along terminal..contact_p -> contact_q..terminal
        ns = 0
        v = contact_p
        while parent[v] != _TERMINAL:
            path_s[ns] = v
            ns += 1
            v = parent[v]
        path_s[ns] = v
        ns += 1
        s_root = v

        nt = 0
        v = contact_q
        while parent[v] != _TERMINAL:
            path_t[nt] = v
            nt += 1
            v = parent[v]
        path_t[nt] = v
        nt += 1
        t_root = v

        bottleneck = ncap[contact_p, contact_d]
        if tcap[s_root] < bottleneck:
            bottleneck = tcap[s_root]
        if -tcap[t_root] < bottleneck:
            bottleneck = -tcap[t_root]
        for idx in range(ns - 1):
            v = path_s[idx]
            u = parent[v]
            res = ncap[u, pdir[v] ^ 1]  # arc u -> v
            if res < bottleneck:
                bottleneck = res
        for idx in range(nt - 1):
            v = path_t[idx]
            res = ncap[v, pdir[v]]  # arc v -> parent
            if res < bottleneck:
                bottleneck = res

        n_orph = 0
        ncap[contact_p, contact_d] -= bottleneck
        ncap[contact_q, contact_d ^ 1] += bottleneck
        tcap[s_root] -= bottleneck
        tcap[t_root] += bottleneck
        if tcap[s_root] <= 0.0:
            parent[s_root] = _NONE
            orphans[n_orph] = s_root
            n_orph += 1
        if tcap[t_root] >= 0.0:
            parent[t_root] = _NONE
            orphans[n_orph] = t_root
            n_orph += 1
        for idx in range(ns - 1):
            v = path_s[idx]
            u = parent[v]
            d_uv = pdir[v] ^ 1
            ncap[u, d_uv] -= bottleneck
            ncap[v, pdir[v]] += bottleneck
            if ncap[u, d_uv] <= 0.0:
                parent[v] = _NONE
                orphans[n_orph] = v
                n_orph += 1
        for idx in range(nt - 1):
            v = path_t[idx]
            ncap[v, pdir[v]] -= bottleneck
            ncap[parent[v], pdir[v] ^ 1] += bottleneck
            if ncap[v, pdir[v]] <= 0.0:
                parent[v] = _NONE
                orphans[n_orph] = v
                n_orph += 1
        flow += bottleneck

        # ---- adopt orphans
        while n_orph > 0:
            n_orph -= 1
            v = orphans[n_orph]
            t_v = tree[v]
            x = v % width
            y = v // width
            new_parent = _NONE
            new_pdir = -1
            for d in range(4):
                if d == 0:
                    if x == width - 1:
                        continue
                    q = v + 1
                elif d == 1:
                    if x == 0:
                        continue
                    q = v - 1
                elif d == 2:
                    if y == height - 1:
                        continue
                    q = v + width
                else:
                    if y == 0:
                        continue
                    q = v - width
                if tree[q] != t_v:
                    continue
                # residual toward v as a child of q
                if t_v == _SRC:
                    res = ncap[q, d ^ 1]
                else:
                    res = ncap[v, d]
                if res <= 0.0:
                    continue
                # q must trace back to a terminal (not through an orphan)
                a = q
                ok = False
                while True:
                    if parent[a] == _TERMINAL:
                        ok = True
                        break
                    if parent[a] == _NONE:
                        break
                    a = parent[a]
                if ok:
                    new_parent = q
                    new_pdir = d
                    break
            if new_parent != _NONE:
                parent[v] = new_parent
                pdir[v] = np.int8(new_pdir)
            else:
                # v leaves the tree; children become orphans, neighbours
                # that could reach v get reactivated
                for d in range(4):
                    if d == 0:
                        if x == width - 1:
                            continue
                        q = v + 1
                    elif d == 1:
                        if x == 0:
                            continue
                        q = v - 1
                    elif d == 2:
                        if y == height - 1:
                            continue
                        q = v + width
                    else:
                        if y == 0:
                            continue
                        q = v - width
                    if tree[q] != t_v:
                        continue
                    if parent[q] == v:
                        parent[q] = _NONE
                        orphans[n_orph] = q
                        n_orph += 1
                    if t_v == _SRC:
                        res = ncap[q, d ^ 1]
                    else:
                        res = ncap[v, d]
                    if res > 0.0 and not in_queue[q]:
                        queue[q_tail] = q
                        q_tail = (q_tail + 1) % n
                        q_len += 1
                        in_queue[q] = True
                # v stays physically queued if flagged; the grow phase skips
                # free nodes when popping, so the flag must not be cleared
                # here (clearing would allow duplicate queue entries)
                tree[v] = _FREE

    labels = np.empty(n, dtype=np.bool_)
    for i in range(n):
        labels[i] = tree[i] == _SRC
    return flow, labels


def solve_grid_cut(source_cap: np.ndarray, sink_cap: np.ndarray, w_right: np.ndarray, w_down: np.ndarray):
    """Minimum s/t cut of a 4-connected grid.

    source_cap / sink_cap: (H, W) unary capacities (label cost of the
    opposite side); w_right: (H, W-1) and w_down: (H-1, W) symmetric
    neighbour weights. Returns (flow, labels (H, W) bool with True =
    source side).
    """
    sc = np.asarray(source_cap, dtype=np.float64)
    kc = np.asarray(sink_cap, dtype=np.float64)
    h, w = sc.shape
    tcap = (sc - kc).ravel().copy()
    ncap = np.zeros((h * w, 4), dtype=np.float64)
    wr = np.asarray(w_right, dtype=np.float64)
    wd = np.asarray(w_down, dtype=np.float64)
    idx = np.arange(h * w).reshape(h, w)
    ncap[idx[:, :-1].ravel(), 0] = wr.ravel()
    ncap[idx[:, 1:].ravel(), 1] = wr.ravel()
    ncap[idx[:-1, :].ravel(), 2] = wd.ravel()
    ncap[idx[1:, :].ravel(), 3] = wd.ravel()
    flow, labels = _bk_grid_maxflow(tcap, ncap, w, h)
    return float(flow), labels.reshape(h, w)


def using_numba() -> bool:
    return _HAVE_NUMBA
