"""Shuffle-and-merge Transformer encoder with explicit reverse-mode gradients.

Every sample is processed on its own: its sources (one per record and
modality) are stacked into one token matrix whose rows stay grouped by
source. Shuffling and merging act inside a source block; attention spans all
rows. Forward functions return a cache that the matching backward consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .params import ModelConfig, ModelParams
from .tokenizer import encode_attributes, project


class NonFiniteError(FloatingPointError):
    pass


# -- single ops -------------------------------------------------------------

def shuffle(tokens: np.ndarray, perm) -> tuple[np.ndarray, np.ndarray]:
    """Reorder rows by ``perm``; returns the shuffled rows and the inverse map."""
    perm = np.asarray(perm, dtype=np.intp)
    n = tokens.shape[0]
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ValueError("permutation is not a bijection on the source's tokens")
    inverse = np.empty(n, dtype=np.intp)
    inverse[perm] = np.arange(n)
    return tokens[perm], inverse


def merge_groups(offsets, sizes, G: int) -> np.ndarray:
    """Row indices of each second-order token: consecutive runs of G per source."""
    groups = []
    for start, size in zip(offsets, sizes):
        for k in range(size // G):
            groups.append(np.arange(start + k * G, start + (k + 1) * G))
    if not groups:
        return np.zeros((0, G), dtype=np.intp)
    return np.asarray(groups, dtype=np.intp)


def merge_tokens(tokens: np.ndarray, G: int, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Second-order tokens of one (already shuffled) source; a remainder < G is left out."""
    idx = merge_groups([0], [tokens.shape[0]], G)
    return tokens[idx].reshape(len(idx), G * tokens.shape[1]) @ W + b


def layer_norm(x, g, b, eps=1e-5):
    return kernels.layernorm_forward(np.ascontiguousarray(x), g, b, eps)[0]


def _heads_split(x, h):
    T, d = x.shape
    return np.ascontiguousarray(x.reshape(T, h, d // h).transpose(1, 0, 2))


def _heads_join(x):
    h, T, dh = x.shape
    return x.transpose(1, 0, 2).reshape(T, h * dh)


def attention_forward(U, p: ModelParams, pre: str, heads: int, eps: float):
    T, d = U.shape
    dh = d // heads
    Q = U @ p[pre + "q.W"] + p[pre + "q.b"]
    K = U @ p[pre + "k.W"] + p[pre + "k.b"]
    V = U @ p[pre + "v.W"] + p[pre + "v.b"]
    Qh, Kh, Vh = _heads_split(Q, heads), _heads_split(K, heads), _heads_split(V, heads)
    scale = 1.0 / np.sqrt(dh)
    P = kernels.softmax_rows(np.ascontiguousarray(Qh @ Kh.transpose(0, 2, 1) * scale))
    O = _heads_join(P @ Vh)
    R = U + O @ p[pre + "o.W"] + p[pre + "o.b"]
    out, xhat, rstd = kernels.layernorm_forward(R, p[pre + "ln1.g"], p[pre + "ln1.b"], eps)
    cache = (U, Qh, Kh, Vh, P, O, xhat, rstd, scale)
    return out, P, cache


def attention_backward(dout, cache, p: ModelParams, pre: str, grads: ModelParams):
    U, Qh, Kh, Vh, P, O, xhat, rstd, scale = cache
    heads = P.shape[0]
    dR, dg, db = kernels.layernorm_backward(np.ascontiguousarray(dout), xhat, rstd, p[pre + "ln1.g"])
    grads[pre + "ln1.g"] += dg
    grads[pre + "ln1.b"] += db
    grads[pre + "o.W"] += O.T @ dR
    grads[pre + "o.b"] += dR.sum(axis=0)
    dOh = _heads_split(dR @ p[pre + "o.W"].T, heads)
    dP = dOh @ Vh.transpose(0, 2, 1)
    dVh = P.transpose(0, 2, 1) @ dOh
    dS = kernels.softmax_rows_backward(P, np.ascontiguousarray(dP)) * scale
    dQh = dS @ Kh
    dKh = dS.transpose(0, 2, 1) @ Qh
    dU = dR.copy()
    for name, dXh in (("q", dQh), ("k", dKh), ("v", dVh)):
        dX = _heads_join(dXh)
        grads[pre + name + ".W"] += U.T @ dX
        grads[pre + name + ".b"] += dX.sum(axis=0)
        dU += dX @ p[pre + name + ".W"].T
    return dU


def self_attention(U, p: ModelParams, pre: str, heads: int, eps: float = 1e-5):
    """Multi-head self-attention + residual + layer norm; returns (tokens, probabilities)."""
    out, P, _ = attention_forward(U, p, pre, heads, eps)
    return out, P


# -- sample layout ----------------------------------------------------------

@dataclass
class Layout:
    sizes: list
    offsets: list
    records: list
    modalities: list

    @property
    def n(self) -> int:
        return int(sum(self.sizes))

    @classmethod
    def of(cls, inp) -> "Layout":
        sizes = [s.n_tokens for s in inp.sources]
        offsets = list(np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(int)) if sizes else []
        return cls(sizes, offsets, [s.record for s in inp.sources],
                   [s.modality.value for s in inp.sources])


def draw_permutations(layout: Layout, config: ModelConfig, rng: Optional[np.random.Generator]):
    """One permutation per layer per source; identities when shuffling is off."""
    out = []
    for _ in range(config.encoder.layers):
        if config.encoder.shuffle:
            if rng is None:
                raise ValueError("shuffling needs an explicit generator or fixed permutations")
            out.append([rng.permutation(n) for n in layout.sizes])
        else:
            out.append([np.arange(n) for n in layout.sizes])
    return out


def _full_permutation(layout: Layout, perms_layer) -> np.ndarray:
    parts = []
    for off, size, perm in zip(layout.offsets, layout.sizes, perms_layer):
        perm = np.asarray(perm, dtype=np.intp)
        if perm.shape != (size,) or not np.array_equal(np.sort(perm), np.arange(size)):
            raise ValueError("permutation is not a bijection on the source's tokens")
        parts.append(off + perm)
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.intp)


# -- embedding --------------------------------------------------------------

def embed(inp, p: ModelParams, config: ModelConfig) -> np.ndarray:
    tables = {
        "positional": p["enc.positional"], "time": p["enc.time"],
        "modality": p["enc.modality"], "status": p["enc.status"],
    }
    rows = []
    for src in inp.sources:
        m = src.modality.value
        tok = project(src.segments, p[f"proj.{m}.W"], p[f"proj.{m}.b"])
        rows.append(encode_attributes(tok, np.arange(src.n_tokens), src.hour,
                                      src.modality.index, src.status, tables, config.encodings))
    return np.vstack(rows)


def embed_backward(dH, inp, p: ModelParams, config: ModelConfig, grads: ModelParams,
                   want_inputs: bool = False):
    enabled = config.encodings
    input_grads = []
    off = 0
    for src in inp.sources:
        n = src.n_tokens
        dX = dH[off:off + n]
        off += n
        m = src.modality.value
        grads[f"proj.{m}.W"] += src.segments.T @ dX
        grads[f"proj.{m}.b"] += dX.sum(axis=0)
        col = dX.sum(axis=0)
        if "positional" in enabled:
            grads["enc.positional"][:n] += dX
        if "time" in enabled:
            grads["enc.time"][src.hour] += col
        if "modality" in enabled:
            grads["enc.modality"][src.modality.index] += col
        if src.status is not None and "status" in enabled:
            grads["enc.status"][src.status] += col
        if want_inputs:
            input_grads.append(dX @ p[f"proj.{m}.W"].T)
    return input_grads


# -- encoder layer ------------------------------------------------------------

def _check_finite(x, where):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite activations in {where}")


def layer_forward(H, order, layout: Layout, perms_layer, p: ModelParams, config: ModelConfig,
                  layer: int):
    """One shuffle-merge-attend-drop-feedforward step.

    ``order`` maps each row to its original segment index; it is permuted
    along with the rows so traces can report original positions.
    """
    enc = config.encoder
    pre = f"layer{layer}."
    N = H.shape[0]
    perm = _full_permutation(layout, perms_layer)
    Hs = H[perm]
    order = order[perm]
    if enc.G >= 2:
        idx = merge_groups(layout.offsets, layout.sizes, enc.G)
        Zin = Hs[idx].reshape(len(idx), enc.G * H.shape[1])
        Z = Zin @ p[pre + "merge.W"] + p[pre + "merge.b"]
        U = np.vstack([Hs, Z])
    else:
        idx, Zin = None, None
        U = Hs
    U1, P, att_cache = attention_forward(U, p, pre, enc.heads, enc.eps)
    _check_finite(U1, f"layer {layer} attention")
    H1 = U1[:N]
    A = H1 @ p[pre + "ff1.W"] + p[pre + "ff1.b"]
    Ar = np.maximum(A, 0.0)
    R2 = H1 + Ar @ p[pre + "ff2.W"] + p[pre + "ff2.b"]
    H2, xhat2, rstd2 = kernels.layernorm_forward(R2, p[pre + "ln2.g"], p[pre + "ln2.b"], enc.eps)
    _check_finite(H2, f"layer {layer} feed-forward")
    cache = (perm, idx, Zin, att_cache, H1, A, Ar, xhat2, rstd2, U.shape[0])
    return H2, order, P, idx, cache


def layer_backward(dH2, cache, p: ModelParams, config: ModelConfig, layer: int,
                   grads: ModelParams):
    pre = f"layer{layer}."
    perm, idx, Zin, att_cache, H1, A, Ar, xhat2, rstd2, T = cache
    N = dH2.shape[0]
    dR2, dg, db = kernels.layernorm_backward(np.ascontiguousarray(dH2), xhat2, rstd2,
                                             p[pre + "ln2.g"])
    grads[pre + "ln2.g"] += dg
    grads[pre + "ln2.b"] += db
    grads[pre + "ff2.W"] += Ar.T @ dR2
    grads[pre + "ff2.b"] += dR2.sum(axis=0)
    dA = (dR2 @ p[pre + "ff2.W"].T) * (A > 0)
    grads[pre + "ff1.W"] += H1.T @ dA
    grads[pre + "ff1.b"] += dA.sum(axis=0)
    dH1 = dR2 + dA @ p[pre + "ff1.W"].T
    dU1 = np.zeros((T, dH2.shape[1]))
    dU1[:N] = dH1  # second-order rows were dropped: no gradient from above
    dU = attention_backward(dU1, att_cache, p, pre, grads)
    dHs = dU[:N].copy()
    if idx is not None:
        dZ = dU[N:]
        grads[pre + "merge.W"] += Zin.T @ dZ
        grads[pre + "merge.b"] += dZ.sum(axis=0)
        dZin = dZ @ p[pre + "merge.W"].T
        dHs[idx.ravel()] += dZin.reshape(-1, dHs.shape[1])  # groups never overlap
    dH = np.empty_like(dHs)
    dH[perm] = dHs
    return dH


# -- full model -------------------------------------------------------------

@dataclass
class ForwardResult:
    logits: np.ndarray
    trace: Optional[list] = None
    cache: Optional[tuple] = field(default=None, repr=False)


def _column_tags(layout: Layout, order, idx):
    src_of_row = np.repeat(np.arange(len(layout.sizes)), layout.sizes)
    tags = [
        {"record": layout.records[s], "modality": layout.modalities[s],
         "segments": [int(order[i])], "order": 1}
        for i, s in enumerate(src_of_row)
    ]
    if idx is not None:
        for group in idx:
            s = src_of_row[group[0]]
            tags.append({"record": layout.records[s], "modality": layout.modalities[s],
                         "segments": [int(order[i]) for i in group], "order": 2})
    return tags


def forward(inp, p: ModelParams, config: ModelConfig, perms=None,
            rng: Optional[np.random.Generator] = None, capture_trace: bool = False,
            keep_cache: bool = False) -> ForwardResult:
    layout = Layout.of(inp)
    if layout.n == 0:
        raise ValueError("sample has no tokens")
    if perms is None:
        perms = draw_permutations(layout, config, rng)
    H = embed(inp, p, config)
    order = np.concatenate([np.arange(n) for n in layout.sizes])
    query_record = max(layout.records)
    caches, trace = [], [] if capture_trace else None
    for layer in range(config.encoder.layers):
        H, order_shuffled, P, idx, cache = layer_forward(H, order, layout, perms[layer], p,
                                                        config, layer)
        if capture_trace:
            # rows/columns are in this layer's shuffled order
            cols = _column_tags(layout, order_shuffled, idx)
            rows = [i for i, c in enumerate(cols[:layout.n]) if c["record"] == query_record]
            trace.append({
                "layer": layer,
                "probs": P[:, rows, :].copy(),
                "row_tags": [cols[i] for i in rows],
                "col_tags": cols,
            })
        order = order_shuffled
        caches.append(cache)
    pooled = H.mean(axis=0)
    hid = pooled @ p["head.hidden.W"] + p["head.hidden.b"]
    hr = np.maximum(hid, 0.0)
    logits = hr @ p["head.out.W"] + p["head.out.b"]
    cache = (layout, caches, H.shape[0], pooled, hid, hr) if keep_cache else None
    return ForwardResult(logits, trace, cache)


def backward(dlogits, result: ForwardResult, inp, p: ModelParams, config: ModelConfig,
             grads: ModelParams, want_inputs: bool = False):
    """Accumulate parameter gradients into ``grads``; optionally return d(loss)/d(segments)."""
    layout, caches, N, pooled, hid, hr = result.cache
    grads["head.out.W"] += np.outer(hr, dlogits)
    grads["head.out.b"] += dlogits
    dhid = (p["head.out.W"] @ dlogits) * (hid > 0)
    grads["head.hidden.W"] += np.outer(pooled, dhid)
    grads["head.hidden.b"] += dhid
    dpooled = p["head.hidden.W"] @ dhid
    dH = np.tile(dpooled / N, (N, 1))
    for layer in reversed(range(config.encoder.layers)):
        dH = layer_backward(dH, caches[layer], p, config, layer, grads)
    return embed_backward(dH, inp, p, config, grads, want_inputs)
