"""Message-passing layers on index-based graphs.

Homogeneous layers take node states ``h`` of shape (N, d) and a directed
edge list ``(src, dst)``; messages flow src -> dst.  Heterogeneous layers
take ``h`` as a dict keyed by node type and ``edges`` as a dict keyed by
``(src_type, relation, dst_type)`` with values ``(src, dst, edge_features)``.
Weights multiply from the right (``h @ W``).  ``act=None`` means identity.
"""
from __future__ import annotations

import numpy as np

from .. import autodiff as ad


def _act(x, act):
    return x if act is None else act(x)


def with_self_loops(src, dst, n):
    loop = np.arange(n)
    return np.concatenate([src, loop]), np.concatenate([dst, loop])


def gcn_layer(h, src, dst, n, W, b=None, act=None):
    """Symmetric-normalised aggregation over N(i) plus a self-loop, then h @ W."""
    s, d = with_self_loops(src, dst, n)
    deg = np.bincount(d, minlength=n).astype(h.dtype)
    norm = (1.0 / np.sqrt(deg[s] * deg[d]))[:, None]
    agg = ad.scatter_add(ad.gather(h, s) * norm.astype(h.dtype), d, n)
    out = agg @ W
    if b is not None:
        out = out + b
    return _act(out, act)


def gat_layer(h, src, dst, n, W, a_src, a_dst, heads=1, slope=0.2, act=None, return_attention=False):
    """Multi-head graph attention with forced self-loops; heads are concatenated.

    ``a_src``/``a_dst`` have shape (heads, d_head) and score the sender and
    receiver halves of ``[W h_i || W h_j]``.
    """
    s, d = with_self_loops(src, dst, n)
    z = h @ W
    dh = z.shape[-1] // heads
    z3 = ad.reshape(z, (n, heads, dh))
    score_dst = ad.sum_(z3 * a_dst, axis=-1)  # (n, heads)
    score_src = ad.sum_(z3 * a_src, axis=-1)
    e = ad.leaky_relu(ad.gather(score_dst, d) + ad.gather(score_src, s), slope)
    alpha = ad.segment_softmax(e, d, n)  # (E, heads)
    msg = ad.gather(z3, s) * ad.reshape(alpha, alpha.shape + (1,))
    out = ad.reshape(ad.scatter_add(msg, d, n), (n, heads * dh))
    out = _act(out, act)
    return (out, alpha, (s, d)) if return_attention else out


def gin_layer(h, src, dst, n, eps, W1, b1, W2, b2, act=ad.relu):
    """MLP((1 + eps) h_i + sum_{j in N(i)} h_j); self excluded from the sum.

    ``act`` is the nonlinearity between the two affine maps of the MLP.
    """
    agg = ad.scatter_add(ad.gather(h, src), dst, n)
    z = h * (1.0 + eps) + agg
    hidden = _act(z @ W1 + b1, act)
    return hidden @ W2 + b2


def attention_mask(n, src, dst):
    """Additive (n, n) mask: row i may attend to column j when j -> i is an edge
    or i == j (0 there, -inf elsewhere)."""
    m = np.full((n, n), -np.inf)
    m[dst, src] = 0.0
    m[np.arange(n), np.arange(n)] = 0.0
    return m


def graph_transformer_layer(h, mask, n_graphs, WQ, WK, WV, heads=1, act=None, return_attention=False):
    """softmax(Q K^T / sqrt(d_k) + M) V per graph and head; heads concatenated.

    ``h`` stacks ``n_graphs`` graphs of identical size (rows graph-major) and
    ``mask`` is the shared (n, n) additive mask.
    """
    N, _ = h.shape
    n = N // n_graphs
    hid = WQ.shape[-1]
    dk = hid // heads

    def split(x):
        return ad.transpose(ad.reshape(x, (n_graphs, n, heads, dk)), (0, 2, 1, 3))

    q, k, v = split(h @ WQ), split(h @ WK), split(h @ WV)
    scores = (q @ ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dk))
    attn = ad.masked_softmax(scores, mask)
    out = ad.reshape(ad.transpose(attn @ v, (0, 2, 1, 3)), (N, hid))
    out = _act(out, act)
    return (out, attn) if return_attention else out


def mean_aggregation_layer(h, src, dst, n, W_self, W_nbr, act=None):
    """h_i' = act(h_i W_self + mean_{j -> i} (h_j W_nbr)); no-neighbour nodes get 0 from the mean."""
    out = h @ W_self
    if len(src):
        msg = ad.gather(h, src) @ W_nbr
        deg = np.maximum(np.bincount(dst, minlength=n), 1).astype(h.dtype)
        out = out + ad.scatter_add(msg, dst, n) * (1.0 / deg)[:, None]
    return _act(out, act)


def heterognn_layer(h, edges, W_type, W_rel, act=None):
    """Per-type projection plus the sum over relations of mean-aggregated messages.

    A relation's message is ``[h_j || e_ij] @ W_rel[relation]``; empty relations
    contribute nothing.  Returns a dict with the same node types as ``h``.
    """
    out = {t: h[t] @ W_type[t] for t in h}
    for key, (src, dst, feat) in edges.items():
        if len(src) == 0 or key not in W_rel:
            continue
        st, _, dt = key
        n = h[dt].shape[0]
        hj = ad.gather(h[st], src)
        if feat is not None and feat.shape[1]:
            hj = ad.concat([hj, ad.astensor(feat, hj)], axis=1)
        msg = hj @ W_rel[key]
        deg = np.maximum(np.bincount(dst, minlength=n), 1).astype(hj.dtype)
        out[dt] = out[dt] + ad.scatter_add(msg, dst, n) * (1.0 / deg)[:, None]
    return {t: _act(v, act) for t, v in out.items()}


def hgt_layer(h, edges, WQ, WK, WV, WA, WO, heads=1, act=None, return_attention=False):
    """Typed multi-head attention with relation-specific key transforms.

    s_ij = q_i^T (W_A[r] k_j) / sqrt(d_k) with q, k, v from the endpoint types'
    projections; the softmax runs jointly over all incoming edges of node i.
    The update is h_i + act(sum_j alpha_ij v_j @ W_O[t_i]), so a node without
    incoming edges keeps its embedding.
    """
    hid = next(iter(WQ.values())).shape[-1]
    dk = hid // heads
    proj = {}
    for t, x in h.items():
        n = x.shape[0]
        proj[t] = tuple(ad.reshape(x @ W[t], (n, heads, dk)) for W in (WQ, WK, WV))

    incoming = {t: ([], [], []) for t in h}  # scores, values, dst
    for key, (src, dst, _) in edges.items():
        if len(src) == 0:
            continue
        st, _, dt = key
        k_s = proj[st][1]
        # (heads, n_s, dk) @ (heads, dk, dk)^T -> keys mapped through W_A per head
        kr = ad.transpose(ad.transpose(k_s, (1, 0, 2)) @ ad.transpose(WA[key], (0, 2, 1)), (1, 0, 2))
        q_i = ad.gather(proj[dt][0], dst)
        score = ad.sum_(q_i * ad.gather(kr, src), axis=-1) * (1.0 / np.sqrt(dk))
        incoming[dt][0].append(score)
        incoming[dt][1].append(ad.gather(proj[st][2], src))
        incoming[dt][2].append(dst)

    out, attn = {}, {}
    for t, x in h.items():
        scores, vals, dsts = incoming[t]
        if not scores:
            out[t] = x
            continue
        n = x.shape[0]
        d = np.concatenate(dsts)
        alpha = ad.segment_softmax(ad.concat(scores, axis=0), d, n)
        msg = ad.concat(vals, axis=0) * ad.reshape(alpha, alpha.shape + (1,))
        agg = ad.reshape(ad.scatter_add(msg, d, n), (n, hid))
        out[t] = x + _act(agg @ WO[t], act)
        attn[t] = (alpha, d)
    return (out, attn) if return_attention else out
