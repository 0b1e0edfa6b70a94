"""GCN encoder, dot-product link scoring, pre-training, and Hits@K.

The encoder is a plain layered propagate-transform-ReLU stack; the link
predictor is the inner product of the two endpoint embeddings. Training is
minibatched over positive edges with fresh uniform negatives every epoch,
model selection by validation Hits@K with early stopping.
"""

import copy
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import InputError, NumericError
from .graphs import Csr, Graph
from .rng import stream_rng
from .splits import DatasetSplit, sample_negatives


@dataclass
class GcnParams:
    """Per-layer weights and biases; the last layer is the embedding head
    consumed by the parameter-free dot-product predictor."""

    weights: list
    biases: list
    dropout: float = 0.1
    hidden: int = 128

    @property
    def layer_count(self):
        return len(self.weights)

    def named(self):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"gnn.w{i}"] = w
            out[f"gnn.b{i}"] = b
        return out

    def copy(self):
        return copy.deepcopy(self)

    def meta(self):
        return {"meta.dropout": np.array([self.dropout]),
                "meta.hidden": np.array([float(self.hidden)])}

    @staticmethod
    def from_named(named):
        layers = sum(1 for k in named if k.startswith("gnn.w"))
        if layers == 0:
            raise InputError("checkpoint holds no encoder weights")
        weights = [named[f"gnn.w{i}"] for i in range(layers)]
        biases = [named[f"gnn.b{i}"] for i in range(layers)]
        dropout = float(named.get("meta.dropout", np.array([0.1]))[0])
        hidden = int(named.get("meta.hidden", np.array([weights[0].shape[1]]))[0])
        return GcnParams(weights=weights, biases=biases, dropout=dropout, hidden=hidden)


@dataclass
class TrainConfig:
    epochs: int = 1000
    patience: int = 20
    lr: float = 1e-3
    dropout: float = 0.1
    batch_size: int = 0  # 0 = full batch
    seed: int = 0
    eval_k: int = 20

    def __post_init__(self):
        if self.patience > self.epochs:
            raise InputError("patience must be <= epochs")
        if self.eval_k < 1:
            raise InputError("eval_k must be >= 1")
        if self.epochs < 1:
            raise InputError("epochs must be >= 1")


def init_gcn_params(d_in, hidden=128, layers=2, out_dim=None, dropout=0.1, rng=None):
    """Glorot-initialized stack d_in -> hidden -> ... -> out_dim."""
    if layers < 1:
        raise InputError("layer count must be >= 1")
    if rng is None:
        rng = np.random.default_rng(0)
    out_dim = hidden if out_dim is None else out_dim
    dims = [d_in] + [hidden] * (layers - 1) + [out_dim]
    weights, biases = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (a + b))
        weights.append(rng.uniform(-bound, bound, size=(a, b)))
        biases.append(np.zeros(b))
    return GcnParams(weights=weights, biases=biases, dropout=dropout, hidden=hidden)


def normalize_adjacency(a: Csr) -> Csr:
    """D^-1/2 (A + I) D^-1/2 over CSR; self-loops cover isolated nodes."""
    n = a.shape[0]
    rows = np.concatenate([a.row_ids(), np.arange(n)])
    cols = np.concatenate([a.indices, np.arange(n)])
    vals = np.concatenate([a.data, np.ones(n)])
    deg = np.zeros(n)
    np.add.at(deg, rows, vals)
    dinv = 1.0 / np.sqrt(deg)
    return Csr.from_coo(n, rows, cols, dinv[rows] * vals * dinv[cols], symmetric=True)


def normalize_dense_adjacency(a) -> ad.Tensor:
    """Differentiable D^-1/2 (A + I) D^-1/2 for generated weighted blocks."""
    a = a if isinstance(a, ad.Tensor) else ad.Tensor(a)
    n = a.shape[0]
    m = ad.add(a, ad.Tensor(np.eye(n)))
    d = ad.tsum(m, axis=1)
    dinv = ad.exp(ad.mul(ad.log(d), ad.Tensor(-0.5)))
    scaled = ad.mul(m, dinv)  # column scaling via broadcast
    return ad.mul(scaled, ad.reshape(dinv, (n, 1)))  # row scaling


def gcn_forward(params, a_norm, x, rng=None, training=False, leaves=None) -> ad.Tensor:
    """Embeddings for every node; pass tape leaves to make it differentiable.

    a_norm is either a Csr (fixed propagation) or a Tensor (generated,
    differentiable, dense). Dropout runs between layers only while training.
    """
    named = leaves if leaves is not None else params.named()
    h = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
    n = h.shape[0]
    order = a_norm.shape[0]
    if order != n:
        raise InputError(f"adjacency order {order} != feature rows {n}")
    sparse = isinstance(a_norm, Csr)
    for i in range(params.layer_count):
        z = ad.matmul(h, named[f"gnn.w{i}"])
        prop = ad.sparse_matmul(a_norm, z) if sparse else ad.matmul(a_norm, z)
        h = ad.add(prop, named[f"gnn.b{i}"])
        if i < params.layer_count - 1:
            h = ad.relu(h)
            if training and params.dropout > 0.0:
                if rng is None:
                    raise InputError("training-mode dropout needs an rng")
                h = ad.dropout(h, params.dropout, rng, training=True)
    return h


def score_link(h, u, v):
    """Dot-product logit for one candidate link; sigmoid of it is the
    edge probability."""
    if isinstance(h, ad.Tensor):
        hu = ad.gather_rows(h, np.array([u]))
        hv = ad.gather_rows(h, np.array([v]))
        return ad.tsum(ad.mul(hu, hv))
    h = np.asarray(h)
    if not (0 <= u < h.shape[0] and 0 <= v < h.shape[0]):
        raise InputError(f"node id out of range for {h.shape[0]} embeddings")
    return float(h[u] @ h[v])


def score_pairs(h, pairs) -> ad.Tensor:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    h = h if isinstance(h, ad.Tensor) else ad.Tensor(h)
    if pairs.size and (pairs.min() < 0 or pairs.max() >= h.shape[0]):
        raise InputError(f"pair id out of range for {h.shape[0]} embeddings")
    hu = ad.gather_rows(h, pairs[:, 0])
    hv = ad.gather_rows(h, pairs[:, 1])
    return ad.tsum(ad.mul(hu, hv), axis=1)


def lp_loss(pos_logits, neg_logits) -> ad.Tensor:
    """Mean BCE over all samples, targets 1 for positives and 0 for negatives.

    Either side may be empty (mixed-label co-training batches), not both.
    """
    parts, targets = [], []
    for logits, t in ((pos_logits, 1.0), (neg_logits, 0.0)):
        if logits is None:
            continue
        logits = logits if isinstance(logits, ad.Tensor) else ad.Tensor(logits)
        if logits.value.size == 0:
            continue
        parts.append(logits)
        targets.append(np.full(logits.value.shape[0], t))
    if not parts:
        raise InputError("lp_loss needs at least one positive or negative logit")
    joined = parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)
    return ad.bce_with_logits(joined, np.concatenate(targets))


def hits_at_k(pos_scores, neg_scores, k) -> float:
    """Fraction of positives strictly above the k-th highest negative."""
    pos = np.asarray(pos_scores, dtype=np.float64).reshape(-1)
    neg = np.asarray(neg_scores, dtype=np.float64).reshape(-1)
    if k < 1:
        raise InputError("k must be >= 1")
    if neg.size < k:
        raise InputError(f"need at least k={k} negative scores, got {neg.size}")
    if pos.size == 0:
        raise InputError("no positive scores to rank")
    threshold = np.partition(neg, neg.size - k)[neg.size - k]
    return float(np.mean(pos > threshold))


def embed(params: GcnParams, a_norm: Csr, x) -> np.ndarray:
    return gcn_forward(params, a_norm, x, training=False).value


def evaluate_hits(params, a_norm, x, pos_edges, neg_edges, k) -> float:
    h = embed(params, a_norm, x)
    pos = np.asarray(pos_edges, dtype=np.int64).reshape(-1, 2)
    neg = np.asarray(neg_edges, dtype=np.int64).reshape(-1, 2)
    pos_scores = (h[pos[:, 0]] * h[pos[:, 1]]).sum(axis=1)
    neg_scores = (h[neg[:, 0]] * h[neg[:, 1]]).sum(axis=1)
    return hits_at_k(pos_scores, neg_scores, k)


def save_gnn_checkpoint(path, params: GcnParams, adam: ad.AdamState = None,
                        extra_meta: dict = None):
    named = {**params.named(), **params.meta()}
    for key, val in (extra_meta or {}).items():
        named[f"meta.{key}"] = np.atleast_1d(np.asarray(val, dtype=np.float64))
    ad.save_checkpoint(path, named, adam=adam)


def load_gnn_checkpoint(path):
    named, adam = ad.load_checkpoint(path)
    meta = {k[5:]: float(v[0]) for k, v in named.items() if k.startswith("meta.")}
    return GcnParams.from_named(named), meta, adam


@dataclass
class GnnPretrainResult:
    params: GcnParams
    trace: list
    best_epoch: int
    best_valid: float


def pretrain_gnn(
    g: Graph,
    split: DatasetSplit,
    cfg: TrainConfig,
    hidden=128,
    layers=2,
    eval_graph: Graph = None,
    train_edge_hook=None,
) -> GnnPretrainResult:
    """Train on the observed adjacency; return the best-validation params.

    g must be the training-visible graph. Gradient steps see only train
    positives plus negatives freshly sampled from g's non-edges each epoch;
    train_edge_hook (if given) receives every edge batch that reaches a
    gradient step, so leakage can be audited from outside.
    """
    d_in = g.features.shape[1]
    init_rng = stream_rng(cfg.seed, "init")
    params = init_gcn_params(d_in, hidden=hidden, layers=layers,
                             dropout=cfg.dropout, rng=init_rng)
    a_norm = normalize_adjacency(g.adjacency)
    eval_norm = a_norm if eval_graph is None else normalize_adjacency(eval_graph.adjacency)
    state = ad.AdamState(lr=cfg.lr)
    pos_all = split.train_pos
    best = params.copy()
    best_valid = -1.0
    best_epoch = 0
    trace = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = stream_rng(cfg.seed, f"shuffle.e{epoch}").permutation(pos_all.shape[0])
        batches = (
            [pos_all[order]]
            if cfg.batch_size <= 0
            else [
                pos_all[order[i : i + cfg.batch_size]]
                for i in range(0, pos_all.shape[0], cfg.batch_size)
            ]
        )
        losses = []
        for bi, pos in enumerate(batches):
            neg = sample_negatives(
                g, pos.shape[0], rng=stream_rng(cfg.seed, f"negatives.e{epoch}.b{bi}")
            )
            if train_edge_hook is not None:
                train_edge_hook(epoch, pos, neg)
            tape = ad.Tape()
            leaves = tape.leaves(params.named())
            h = gcn_forward(
                params, a_norm, g.features,
                rng=stream_rng(cfg.seed, f"dropout.e{epoch}.b{bi}"),
                training=True, leaves=leaves,
            )
            loss = lp_loss(score_pairs(h, pos), score_pairs(h, neg))
            if not np.isfinite(loss.value):
                raise NumericError(f"training loss diverged at epoch {epoch}")
            grads = ad.backward(loss).named(leaves)
            ad.adam_step(state, params.named(), grads)
            losses.append(loss.item())
        valid_hits = evaluate_hits(
            params, eval_norm, g.features, split.valid_pos, split.valid_neg, cfg.eval_k
        )
        trace.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "valid_hits": valid_hits,
                "seconds": time.perf_counter() - t0,
            }
        )
        if valid_hits > best_valid:
            best_valid = valid_hits
            best = params.copy()
            best_epoch = epoch
        if epoch - best_epoch >= cfg.patience:
            break
    return GnnPretrainResult(params=best, trace=trace, best_epoch=best_epoch,
                             best_valid=best_valid)
