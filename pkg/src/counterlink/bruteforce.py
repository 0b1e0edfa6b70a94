"""Reference heuristic implementations kept independent of the CSR fast path.

verify_split re-checks every bucket assignment against these, so they must
not share code with graphs.py: plain python sets and a dict-based BFS.
"""

import math
from collections import deque


def adjacency_sets(num_nodes, edges):
    sets = [set() for _ in range(num_nodes)]
    for u, v in edges:
        sets[int(u)].add(int(v))
        sets[int(v)].add(int(u))
    return sets


def cn_brute(adj, u, v):
    return len((adj[u] & adj[v]) - {u, v})


def sp_brute(adj, u, v, exclude_edge=False):
    if u == v:
        return 0
    skip = exclude_edge and v in adj[u]
    dist = {u: 0}
    q = deque([u])
    while q:
        w = q.popleft()
        for x in adj[w]:
            if skip and {w, x} == {u, v}:
                continue
            if x not in dist:
                dist[x] = dist[w] + 1
                if x == v:
                    return dist[x]
                q.append(x)
    return math.inf


def pa_brute(adj, u, v):
    return len(adj[u]) * len(adj[v])


def heuristic_brute(adj, u, v, name, exclude_edge=False):
    if name == "CN":
        return cn_brute(adj, u, v)
    if name == "SP":
        return sp_brute(adj, u, v, exclude_edge=exclude_edge)
    if name == "PA":
        return pa_brute(adj, u, v)
    raise ValueError(f"unknown heuristic {name!r}")
