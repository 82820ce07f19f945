"""Attention-enhanced dynamic-synchronised graph-convolutional LSTM.

Shapes: node features are ``(..., N, d)``; a leading batch axis is optional
throughout.  All functions accept either numpy arrays or :class:`~gaitsync.autograd.Var`
objects, so the same code serves inference and training.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import Var

GATES = ("i", "f", "o", "c")


class ShapeError(ValueError):
    pass


# -- graph structure -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GraphStructure:
    """``K`` partition adjacencies and their degree-normalised forms.

    ``adjacency[k]`` is ``A_k``; ``normalized[k]`` is
    ``Lambda_k^-1/2 A_k Lambda_k^-1/2`` with ``Lambda_k`` the row sums of
    ``A_k`` (zero-degree rows give zero).
    """

    adjacency: np.ndarray
    normalized: np.ndarray

    @property
    def K(self) -> int:
        return self.adjacency.shape[0]

    @property
    def node_count(self) -> int:
        return self.adjacency.shape[1]

    @classmethod
    def from_partitions(cls, partitions) -> GraphStructure:
        A = np.asarray(partitions, dtype=float)
        if A.ndim == 2:
            A = A[None]
        if A.ndim != 3 or A.shape[1] != A.shape[2]:
            raise ShapeError("partitions must be K square matrices")
        if np.any(A < 0):
            raise ValueError("adjacency entries must be non-negative")
        deg = A.sum(axis=2)
        inv = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
        norm = inv[:, :, None] * A * inv[:, None, :]
        A.setflags(write=False)
        norm.setflags(write=False)
        return cls(A, norm)

    @classmethod
    def from_graph(cls, adjacency, positions, K: int = 3) -> GraphStructure:
        """Spatial-configuration partitioning of a symmetric adjacency.

        Partition 1 holds self-loops; with ``K = 3`` a neighbour ``j`` of ``i``
        goes to partition 2 when it is closer to the node centroid than ``i``
        (centripetal) and to partition 3 otherwise (centrifugal).  ``K = 2``
        splits self vs. neighbours and ``K = 1`` keeps everything together.
        """
        adj = np.asarray(adjacency, dtype=float)
        n = adj.shape[0]
        adj = ((adj + adj.T) > 0).astype(float)
        np.fill_diagonal(adj, 0.0)
        eye = np.eye(n)
        if K == 1:
            return cls.from_partitions([adj + eye])
        if K == 2:
            return cls.from_partitions([eye, adj])
        if K != 3:
            raise ValueError("K must be 1, 2 or 3")
        pos = np.asarray(positions, dtype=float).reshape(n, 3)
        r = np.linalg.norm(pos - pos.mean(axis=0), axis=1)
        closer = r[None, :] < r[:, None]  # [i, j]: j closer to centroid than i
        return cls.from_partitions([eye, adj * closer, adj * ~closer])

    def labels(self) -> dict:
        """Partition label (1-based) of every directed edge ``(i, j)``, self-loops included."""
        out = {}
        for k in range(self.K):
            for i, j in zip(*np.nonzero(self.adjacency[k])):
                out[(int(i), int(j))] = k + 1
        return out


def graph_conv(X, structure: GraphStructure, weights):
    """``sum_k Lambda_k^-1/2 A_k Lambda_k^-1/2 X W_k``.

    ``weights`` has shape ``(K, d_in, d_out)``.
    """
    Xv = ag.as_var(X)
    Wv = ag.as_var(weights)
    if Wv.value.ndim != 3 or Wv.shape[0] != structure.K:
        raise ShapeError(f"expected ({structure.K}, d_in, d_out) weights, got {Wv.shape}")
    if Xv.shape[-2] != structure.node_count or Xv.shape[-1] != Wv.shape[1]:
        raise ShapeError(f"feature shape {Xv.shape} does not match graph/weights")
    K, d_in, d_out = Wv.shape
    # propagate through all partitions at once, then one matmul against the stacked bank
    return ag.matmul(ag.propagate(structure.normalized, Xv), ag.reshape(Wv, (K * d_in, d_out)))


# -- parameters ------------------------------------------------------------------

@dataclass(frozen=True)
class ModelDims:
    n_classes: int = 7
    embed_dim: int = 256
    hidden_dim: int = 64
    attention_dim: int = 64
    n_layers: int = 3
    K: int = 3


def _uniform(rng, fan_in, shape):
    a = np.sqrt(1.0 / fan_in)
    return rng.uniform(-a, a, size=shape)


class SyncModel:
    """All trainable parameters, held as named :class:`Var` leaves.

    Gate weights are stored stacked in the order (i, f, o, c):
    ``layer{j}.Wx`` has shape ``(K, d_in, 4 d)`` so ``Wx[..., :d]`` is the
    ``W_xi`` bank, and so on.
    """

    def __init__(self, dims: ModelDims | None = None, seed: int = 0, params: dict | None = None):
        self.dims = dims or ModelDims()
        if params is not None:
            self.params = {k: Var(np.asarray(v, float), requires_grad=True, name=k) for k, v in params.items()}
            return
        d = self.dims
        rng = np.random.default_rng(seed)
        p = {}
        p["embed.W"] = _uniform(rng, 3, (3, d.embed_dim))
        p["embed.b"] = _uniform(rng, 3, (d.embed_dim,))
        h = d.hidden_dim
        p["lstm.W"] = _uniform(rng, 2 * d.embed_dim, (2 * d.embed_dim, 4 * h))
        p["lstm.U"] = _uniform(rng, h, (h, 4 * h))
        p["lstm.b"] = _uniform(rng, h, (4 * h,))
        for j in range(d.n_layers):
            p[f"layer{j}.Wx"] = _uniform(rng, h, (d.K, h, 4 * h))
            p[f"layer{j}.Wh"] = _uniform(rng, h, (d.K, h, 4 * h))
            p[f"layer{j}.b"] = _uniform(rng, h, (4 * h,))
            a = d.attention_dim
            p[f"att{j}.W"] = _uniform(rng, h, (h, h))
            p[f"att{j}.Wh"] = _uniform(rng, h, (h, a))
            p[f"att{j}.Wq"] = _uniform(rng, h, (h, a))
            p[f"att{j}.bs"] = _uniform(rng, h, (a,))
            p[f"att{j}.Us"] = _uniform(rng, a, (a, 1))
            p[f"att{j}.bu"] = _uniform(rng, a, (1,))
        p["head_g.W"] = _uniform(rng, h, (h, d.n_classes))
        p["head_g.b"] = _uniform(rng, h, (d.n_classes,))
        p["head_l.W"] = _uniform(rng, h, (h, d.n_classes))
        p["head_l.b"] = _uniform(rng, h, (d.n_classes,))
        self.params = {k: Var(v, requires_grad=True, name=k) for k, v in p.items()}

    def __getitem__(self, name) -> Var:
        return self.params[name]

    def zero_grad(self):
        for v in self.params.values():
            v.grad = None

    def copy(self) -> SyncModel:
        return SyncModel(self.dims, params={k: v.value.copy() for k, v in self.params.items()})

    def cell(self, j: int) -> CellParams:
        return CellParams(self.params[f"layer{j}.Wx"], self.params[f"layer{j}.Wh"], self.params[f"layer{j}.b"])

    def attention(self, j: int) -> AttentionParams:
        g = lambda n: self.params[f"att{j}.{n}"]  # noqa: E731
        return AttentionParams(g("W"), g("Wh"), g("Wq"), g("bs"), g("Us"), g("bu"))

    def config(self) -> dict:
        return asdict(self.dims)

    def n_parameters(self) -> int:
        return int(sum(v.value.size for v in self.params.values()))


@dataclass(frozen=True, eq=False)
class CellParams:
    Wx: object
    Wh: object
    b: object

    def fused(self):
        # cached so one forward pass records the concatenation once
        f = self.__dict__.get("_fused")
        if f is None:
            f = ag.concat([self.Wx, self.Wh], axis=1)
            object.__setattr__(self, "_fused", f)
        return f

    def gate(self, name: str):
        """Return ``(W_x*, W_h*, b_*)`` for gate ``name`` in ``('i', 'f', 'o', 'c')``."""
        k = GATES.index(name)
        h = np.shape(_val(self.b))[0] // 4
        s = slice(k * h, (k + 1) * h)
        return _val(self.Wx)[..., s], _val(self.Wh)[..., s], _val(self.b)[s]


@dataclass(frozen=True, eq=False)
class AttentionParams:
    W: object
    Wh: object
    Wq: object
    bs: object
    Us: object
    bu: object


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x)


@dataclass
class LayerState:
    H: object
    C: object
    H_hat: object = None
    alpha: object = None

    @classmethod
    def zeros(cls, shape) -> LayerState:
        return cls(np.zeros(shape), np.zeros(shape))


# -- recurrent pieces ------------------------------------------------------------

def attention_scores(H_hat, att: AttentionParams):
    """Per-node attention scores in (0, 1), shape ``(..., N)``."""
    Hh = ag.as_var(H_hat)
    q = ag.relu(ag.matmul(ag.sum(Hh, axis=-2), att.W))  # (..., d): one query per graph
    qa = ag.matmul(q, att.Wq)
    qa = ag.reshape(qa, qa.shape[:-1] + (1, qa.shape[-1]))
    hidden = ag.tanh(ag.add(ag.add(ag.matmul(Hh, att.Wh), qa), att.bs))
    s = ag.add(ag.matmul(hidden, att.Us), att.bu)
    return ag.reshape(ag.sigmoid(s), s.shape[:-1])


def adgc_cell(X_t, prev: LayerState, params: CellParams, att: AttentionParams,
              structure: GraphStructure) -> LayerState:
    """One ADGC-LSTM step: graph-convolutional gates, cell update, attention.

    ``W_x * X + W_h * H`` is evaluated as a single graph convolution of
    ``[X, H]`` against the bank ``[W_x; W_h]``, which is the same sum.
    """
    z = ag.add(graph_conv(ag.concat([X_t, prev.H], axis=-1), structure, params.fused()), params.b)
    zi, zf, zo, zc = ag.split(z, 4, axis=-1)
    i = ag.sigmoid(zi)
    f = ag.sigmoid(zf)
    o = ag.sigmoid(zo)
    u = ag.tanh(zc)
    C = ag.add(ag.mul(f, prev.C), ag.mul(i, u))
    H_hat = ag.mul(o, ag.tanh(C))
    alpha = attention_scores(H_hat, att)
    f_att = ag.mul(ag.expand_last(alpha), H_hat)
    H = ag.add(f_att, H_hat)
    return LayerState(H, C, H_hat, alpha)


def shared_lstm_step(z_in, h, c, U, b):
    """One node-wise LSTM step given the precomputed input projection ``z_in``."""
    z = ag.add(ag.add(z_in, ag.matmul(h, U)), b)
    zi, zf, zo, zc = ag.split(z, 4, axis=-1)
    c = ag.add(ag.mul(ag.sigmoid(zf), c), ag.mul(ag.sigmoid(zi), ag.tanh(zc)))
    h = ag.mul(ag.sigmoid(zo), ag.tanh(c))
    return h, c


def augment_features(P, W, U, b, hidden_dim: int):
    """Shared LSTM over ``concat(P_t, P_{t-1})`` for embeddings ``P`` of shape ``(..., T, N, E)``.

    At ``t = 0`` the previous embedding is taken equal to the current one.
    Returns the list of augmented features ``E_t``, each ``(..., N, hidden_dim)``.
    """
    P = ag.as_var(P)
    T = P.shape[-3]
    first = ag.getitem(P, (Ellipsis, slice(0, 1), slice(None), slice(None)))
    if T > 1:
        head = ag.getitem(P, (Ellipsis, slice(0, T - 1), slice(None), slice(None)))
        prev = ag.concat([first, head], axis=-3)
    else:
        prev = first
    # input projection for every step in one matmul
    Z = ag.matmul(ag.concat([P, prev], axis=-1), W)
    steps = ag.split(Z, T, axis=-3) if T > 1 else [Z]
    shape = P.shape[:-3] + P.shape[-2:-1] + (hidden_dim,)
    h = np.zeros(shape)
    c = np.zeros(shape)
    out = []
    for z in steps:
        h, c = shared_lstm_step(ag.reshape(z, z.shape[:-3] + z.shape[-2:]), h, c, U, b)
        out.append(h)
    return out


def readout(H, alpha, H_hat, head_g=None, head_l=None):
    """Global and local features (and class logits when heads are given).

    ``F_g = sum_i H_i``, ``F_l = sum_i alpha_i * H_hat_i``.
    """
    F_g = ag.sum(ag.as_var(H), axis=-2)
    F_l = ag.sum(ag.mul(ag.expand_last(alpha), H_hat), axis=-2)
    if head_g is None:
        return F_g, F_l
    o_g = ag.add(ag.matmul(F_g, head_g[0]), head_g[1])
    o_l = ag.add(ag.matmul(F_l, head_l[0]), head_l[1])
    return F_g, F_l, o_g, o_l


def class_probs(logits) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    return ag.softmax_np(ag.as_var(logits).value if isinstance(logits, Var) else logits)


# -- full forward ------------------------------------------------------------------

@dataclass
class ForwardResult:
    logits_g: list
    logits_l: list
    alphas: list  # alphas[j][t] -> (..., N)
    states: list  # final LayerState per layer


def forward(model: SyncModel, coords, structure: GraphStructure) -> ForwardResult:
    """Run the network over node coordinates of shape ``(T, N, 3)`` or ``(B, T, N, 3)``."""
    X = np.asarray(coords, dtype=float)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ShapeError(f"coords must be (B, T, N, 3), got {X.shape}")
    B, T, N, _ = X.shape
    if N != structure.node_count:
        raise ShapeError("node count does not match the graph structure")
    d = model.dims
    p = model.params
    P = ag.add(ag.matmul(X, p["embed.W"]), p["embed.b"])
    seq = augment_features(P, p["lstm.W"], p["lstm.U"], p["lstm.b"], d.hidden_dim)
    alphas, states = [], []
    for j in range(d.n_layers):
        cell, att = model.cell(j), model.attention(j)
        state = LayerState.zeros((B, N, d.hidden_dim))
        out, a_hist = [], []
        for t in range(T):
            state = adgc_cell(seq[t], state, cell, att, structure)
            out.append(state)
            a_hist.append(state.alpha)
        alphas.append(a_hist)
        states.append(state)
        seq = [s.H for s in out]
        last = out
    logits_g, logits_l = [], []
    for s in last:
        _, _, og, ol = readout(s.H, s.alpha, s.H_hat, (p["head_g.W"], p["head_g.b"]),
                               (p["head_l.W"], p["head_l.b"]))
        logits_g.append(og)
        logits_l.append(ol)
    return ForwardResult(logits_g, logits_l, alphas, states)


# -- loss ------------------------------------------------------------------------------

@dataclass
class LossTerms:
    total: Var
    ce_g: Var
    ce_l: Var
    reg_attention: Var
    reg_sparsity: Var

    def values(self) -> dict:
        return {k: float(getattr(self, k).value) for k in ("total", "ce_g", "ce_l", "reg_attention", "reg_sparsity")}


def _check_one_hot(y, n_classes):
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != n_classes or np.any((y != 0) & (y != 1)) or np.any(y.sum(axis=-1) != 1):
        raise ValueError("label must be one-hot over the class axis")
    return y


def composite_loss(logits_g, logits_l, y, alphas, lambda_bar: float = 0.01, beta_bar: float = 0.001) -> LossTerms:
    """Global + local cross-entropy summed over steps plus the two attention regularisers.

    ``y`` is one-hot, either per window ``(B, C)`` or per step ``(B, T, C)``.
    ``alphas[j][t]`` are the layer-``j`` attention scores at step ``t``.
    Every term is averaged over the batch.
    """
    T = len(logits_g)
    C = ag.as_var(logits_g[0]).shape[-1]
    y = _check_one_hot(y, C)
    B = ag.as_var(logits_g[0]).shape[0] if ag.as_var(logits_g[0]).value.ndim > 1 else 1
    y_steps = [y[..., t, :] if y.ndim == 3 else y for t in range(T)]

    def ce(logits):
        terms = [ag.sum(ag.mul(ag.log_softmax(lg), -yt)) for lg, yt in zip(logits, y_steps)]
        total = terms[0]
        for tt in terms[1:]:
            total = ag.add(total, tt)
        return ag.mul(total, 1.0 / B)

    ce_g = ce(logits_g)
    ce_l = ce(logits_l)
    reg1 = None
    reg2 = None
    for a_hist in alphas:
        Tj = len(a_hist)
        acc = a_hist[0]
        sq = ag.square(ag.sum(a_hist[0], axis=-1))
        for a in a_hist[1:]:
            acc = ag.add(acc, a)
            sq = ag.add(sq, ag.square(ag.sum(a, axis=-1)))
        r1 = ag.sum(ag.square(ag.sub(1.0, ag.mul(acc, 1.0 / Tj))))
        r2 = ag.mul(ag.sum(sq), 1.0 / Tj)
        reg1 = r1 if reg1 is None else ag.add(reg1, r1)
        reg2 = r2 if reg2 is None else ag.add(reg2, r2)
    reg1 = ag.mul(reg1, lambda_bar / B)
    reg2 = ag.mul(reg2, beta_bar / B)
    total = ag.add(ag.add(ce_g, ce_l), ag.add(reg1, reg2))
    return LossTerms(total, ce_g, ce_l, reg1, reg2)


def predict_proba(model: SyncModel, coords, structure: GraphStructure) -> np.ndarray:
    """Per-step class probabilities ``(B, T, C)``: mean of the global and local heads."""
    res = forward(model, coords, structure)
    pg = np.stack([class_probs(_val(o)) for o in res.logits_g], axis=1)
    pl = np.stack([class_probs(_val(o)) for o in res.logits_l], axis=1)
    return 0.5 * (pg + pl)
