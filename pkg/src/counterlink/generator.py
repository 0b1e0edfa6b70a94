"""Semi-implicit variational auto-encoder over labeled subgraph batches.

The encoder is a two-stage GCN over the block-diagonal batch adjacency whose
node input is [features || endpoint label || injected noise]; mixing noise
makes the posterior semi-implicit, and averaging the analytic Gaussian KL
over the mixing draws gives the Monte-Carlo surrogate used in the training
objective. The decoder is a parameter-free inner product applied per block,
so no probability mass ever exists between distinct samples. Setting one
mixing draw and zero noise width collapses the whole stack to a plain
variational graph auto-encoder.

Generated samples keep their block's node count, original features, and
originating link label; the threshold indicator then removes low-confidence
edges, which is the control that keeps generation from densifying.
"""

import copy
import json
import time
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, InputError, NumericError
from .gnn import normalize_adjacency
from .graphs import Edge, Graph, LabeledSubgraphBatch, POSITIVE, extract_for_links, make_batch
from .rng import stream_rng
from .splits import DatasetSplit

LOG_VAR_CLAMP = 10.0  # exp overflow guard during adversarial ascent


@dataclass
class SiviParams:
    """Encoder weights; mu and log-variance heads share the hidden trunk.

    The decoder has no learnable weights, so this is the whole model.
    """

    w_in: np.ndarray
    b_in: np.ndarray
    w_mu: np.ndarray
    b_mu: np.ndarray
    w_lv: np.ndarray
    b_lv: np.ndarray
    hidden: int = 32
    zdim: int = 16
    noise_dim: int = 8

    def named(self):
        return {
            "ggm.w_in": self.w_in,
            "ggm.b_in": self.b_in,
            "ggm.w_mu": self.w_mu,
            "ggm.b_mu": self.b_mu,
            "ggm.w_lv": self.w_lv,
            "ggm.b_lv": self.b_lv,
        }

    def meta(self):
        return {
            "meta.hidden": np.array([float(self.hidden)]),
            "meta.zdim": np.array([float(self.zdim)]),
            "meta.noise_dim": np.array([float(self.noise_dim)]),
        }

    def copy(self):
        return copy.deepcopy(self)

    @staticmethod
    def from_named(named):
        try:
            return SiviParams(
                w_in=named["ggm.w_in"],
                b_in=named["ggm.b_in"],
                w_mu=named["ggm.w_mu"],
                b_mu=named["ggm.b_mu"],
                w_lv=named["ggm.w_lv"],
                b_lv=named["ggm.b_lv"],
                hidden=int(named["meta.hidden"][0]),
                zdim=int(named["meta.zdim"][0]),
                noise_dim=int(named["meta.noise_dim"][0]),
            )
        except KeyError as exc:
            raise InputError(f"checkpoint is missing generator entry {exc}")


@dataclass(frozen=True)
class NoiseSpec:
    """Width of injected noise, number of mixing draws, truncation index."""

    noise_dim: int = 8
    num_psi: int = 3
    truncation: int = 0

    def __post_init__(self):
        if self.num_psi < 1:
            raise InputError("num_psi must be >= 1")
        if self.noise_dim < 0:
            raise InputError("noise_dim must be >= 0")
        if self.truncation < 0:
            raise InputError("truncation must be >= 0")
        if self.noise_dim == 0 and self.num_psi > 1:
            raise ConfigError(
                "noise_dim=0 with num_psi>1 would mix identical draws; "
                "use num_psi=1 for the plain variational reduction"
            )


@dataclass
class PosteriorSample:
    """Per-draw posterior moments plus the reparameterized latents."""

    mu: list
    log_var: list
    psi_draws: list
    h: list
    snr: float
    block_sizes: np.ndarray
    target_indices: list
    link_labels: np.ndarray


@dataclass
class GeneratedSample:
    """Per-block edge probabilities and their thresholded adjacency.

    z_scaled and r_k are reserved for a rate-based decoder variant and are
    always None here.
    """

    edge_probs: list
    thresholded_adj: list
    block_sizes: np.ndarray
    link_labels: np.ndarray
    target_indices: list
    block_features: list
    gamma: float = 0.0
    z_scaled: object = None
    r_k: object = None

    @property
    def num_blocks(self):
        return len(self.edge_probs)

    def edge_count(self):
        """Undirected generated edge count across blocks."""
        return int(sum(np.triu(a, 1).sum() for a in self.thresholded_adj))


def init_sivi_params(d_in, hidden=32, zdim=16, noise_dim=8, rng=None) -> SiviParams:
    if rng is None:
        rng = np.random.default_rng(0)
    full_in = d_in + 1 + noise_dim  # features + label channel + noise

    def glorot(a, b):
        bound = np.sqrt(6.0 / (a + b))
        return rng.uniform(-bound, bound, size=(a, b))

    return SiviParams(
        w_in=glorot(full_in, hidden),
        b_in=np.zeros(hidden),
        w_mu=glorot(hidden, zdim),
        b_mu=np.zeros(zdim),
        w_lv=glorot(hidden, zdim),
        b_lv=np.zeros(zdim),
        hidden=hidden,
        zdim=zdim,
        noise_dim=noise_dim,
    )


def _conv(a_norm, x, w, b):
    return ad.add(ad.sparse_matmul(a_norm, ad.matmul(x, w)), b)


def encode_semi_implicit(
    params: SiviParams,
    batch: LabeledSubgraphBatch,
    spec: NoiseSpec,
    rng,
    zero_labels=False,
    zero_noise=False,
    leaves=None,
) -> PosteriorSample:
    """Posterior moments per mixing draw over the block-diagonal batch.

    Each draw injects fresh N(0, I) noise columns into the node input; the
    truncation index drops that many leading rows from latent use and is
    only meaningful when leading rows are noise-only, so dropping a target
    row is an error.
    """
    if spec.noise_dim != params.noise_dim:
        raise ConfigError(
            f"noise_dim mismatch: spec {spec.noise_dim} vs params {params.noise_dim}"
        )
    n = batch.total_nodes
    if spec.truncation >= n:
        raise InputError(f"truncation {spec.truncation} >= batched node count {n}")
    if spec.truncation > 0:
        raise InputError(
            "truncation would drop target rows: endpoints occupy the leading "
            "rows of every block in this encoder"
        )
    named = leaves if leaves is not None else params.named()
    x = batch.stacked_features()
    labels = batch.stacked_labels().reshape(-1, 1)
    if zero_labels:
        labels = np.zeros_like(labels)
    a_norm = normalize_adjacency(batch.block_diag_csr())

    mus, lvs, draws = [], [], []
    for _ in range(spec.num_psi):
        cols = [ad.Tensor(x), ad.Tensor(labels)]
        if spec.noise_dim > 0:
            eps = (
                np.zeros((n, spec.noise_dim))
                if zero_noise
                else rng.standard_normal((n, spec.noise_dim))
            )
            draws.append(eps)
            cols.append(ad.Tensor(eps))
        x_in = ad.concat(cols, axis=1)
        hid = ad.relu(_conv(a_norm, x_in, named["ggm.w_in"], named["ggm.b_in"]))
        # Heads are linear, not convolutional: a second propagation round
        # smooths dense blocks into near-constant latents, which destroys
        # the per-pair separability the inner-product decoder relies on.
        mus.append(ad.add(ad.matmul(hid, named["ggm.w_mu"]), named["ggm.b_mu"]))
        lvs.append(
            ad.clip(
                ad.add(ad.matmul(hid, named["ggm.w_lv"]), named["ggm.b_lv"]),
                -LOG_VAR_CLAMP,
                LOG_VAR_CLAMP,
            )
        )
    sigma = np.exp(0.5 * lvs[0].value)
    snr = float(np.abs(mus[0].value).mean() / max(sigma.mean(), 1e-12))
    return PosteriorSample(
        mu=mus,
        log_var=lvs,
        psi_draws=draws,
        h=[],
        snr=snr,
        block_sizes=batch.block_sizes.copy(),
        target_indices=[b.target for b in batch.blocks],
        link_labels=batch.batch_labels.copy(),
    )


def reparameterize(sample: PosteriorSample, rng) -> PosteriorSample:
    """h = mu + eps * exp(0.5 log var), eps drawn block by block per draw."""
    if not sample.mu:
        raise InputError("posterior sample has no moments to reparameterize")
    hs = []
    for mu, lv in zip(sample.mu, sample.log_var):
        eps_blocks = [
            rng.standard_normal((int(m), mu.shape[1])) for m in sample.block_sizes
        ]
        eps = np.concatenate(eps_blocks, axis=0)
        std = ad.exp(ad.mul(lv, ad.Tensor(0.5)))
        hs.append(ad.add(mu, ad.mul(ad.Tensor(eps), std)))
    sample.h = hs
    return sample


def decode_logits(h, block_sizes):
    """Per-block inner-product logit matrices; nothing crosses blocks."""
    if int(np.sum(block_sizes)) != h.shape[0]:
        raise InputError(
            f"block sizes sum to {int(np.sum(block_sizes))} but h has {h.shape[0]} rows"
        )
    out = []
    at = 0
    for m in block_sizes:
        m = int(m)
        z = ad.slice_rows(h, at, at + m)
        out.append(ad.matmul(z, ad.transpose(z)))
        at += m
    return out


def decode_node_aware(h, block_sizes, target_indices, link_labels=None,
                      block_features=None) -> GeneratedSample:
    """Edge probabilities per block from raw latents (no tape needed)."""
    h = h.value if isinstance(h, ad.Tensor) else np.asarray(h, dtype=np.float64)
    block_sizes = np.asarray(block_sizes, dtype=np.int64)
    if int(block_sizes.sum()) != h.shape[0]:
        raise InputError(
            f"block sizes sum to {int(block_sizes.sum())} but h has {h.shape[0]} rows"
        )
    if len(target_indices) != block_sizes.shape[0]:
        raise InputError("one target pair per block required")
    probs, adjs = [], []
    at = 0
    for m in block_sizes:
        m = int(m)
        z = h[at : at + m]
        p = 1.0 / (1.0 + np.exp(-(z @ z.T)))
        np.fill_diagonal(p, 0.0)
        probs.append(p)
        adjs.append((p > 0).astype(np.float64))
        at += m
    k = block_sizes.shape[0]
    return GeneratedSample(
        edge_probs=probs,
        thresholded_adj=adjs,
        block_sizes=block_sizes,
        link_labels=np.asarray(
            link_labels if link_labels is not None else np.ones(k), dtype=np.float64
        ),
        target_indices=list(target_indices),
        block_features=list(block_features) if block_features is not None else [None] * k,
        gamma=0.0,
    )


def kl_gaussian(mu, log_var) -> ad.Tensor:
    """Mean over nodes of the analytic KL to the unit Gaussian prior."""
    mu = mu if isinstance(mu, ad.Tensor) else ad.Tensor(mu)
    log_var = log_var if isinstance(log_var, ad.Tensor) else ad.Tensor(log_var)
    if mu.shape != log_var.shape:
        raise InputError(f"mu shape {mu.shape} != log_var shape {log_var.shape}")
    terms = ad.sub(ad.sub(ad.add(ad.square(mu), ad.exp(log_var)), ad.Tensor(1.0)), log_var)
    return ad.mul(ad.tmean(ad.tsum(terms, axis=1)), ad.Tensor(0.5))


def recon_loss(logits_blocks, adj_blocks) -> ad.Tensor:
    """Mean over blocks of per-node sparsity-weighted BCE against the truth.

    Positive entries are upweighted by the block's non-edge/edge ratio and
    the diagonal is masked out. Each block's weighted sum is divided by its
    node count, matching the per-node KL normalization so neither term
    swamps the other. Single-node blocks contribute zero.
    """
    if len(logits_blocks) != len(adj_blocks):
        raise InputError("one adjacency per logit block required")
    total = None
    for logits, adj in zip(logits_blocks, adj_blocks):
        m = adj.shape[0]
        if m <= 1:
            continue
        pairs = m * (m - 1)
        edges = float(adj.sum())
        pos_w = (pairs - edges) / edges if edges > 0 else 1.0
        weights = np.where(adj > 0, pos_w, 1.0)
        np.fill_diagonal(weights, 0.0)
        term = ad.mul(
            ad.bce_with_logits(logits, adj, weights=weights, reduction="sum"),
            ad.Tensor(1.0 / m),
        )
        total = term if total is None else ad.add(total, term)
    if total is None:
        return ad.Tensor(0.0)
    return ad.mul(total, ad.Tensor(1.0 / len(logits_blocks)))


@dataclass
class ElboResult:
    loss: ad.Tensor
    kl: ad.Tensor
    recon: ad.Tensor


def sivi_elbo(
    params: SiviParams,
    batch: LabeledSubgraphBatch,
    spec: NoiseSpec,
    rng,
    zero_labels=False,
    zero_noise=False,
    leaves=None,
) -> ElboResult:
    """Negated Monte-Carlo evidence bound: weighted BCE plus mean KL.

    recon is the (negative) reconstruction term and kl the draw-averaged
    Gaussian KL, so loss = -(recon - kl); minimizing it maximizes the bound.
    """
    sample = encode_semi_implicit(
        params, batch, spec, rng, zero_labels=zero_labels, zero_noise=zero_noise,
        leaves=leaves,
    )
    sample = reparameterize(sample, rng)
    adjs = batch.block_adjacencies()
    bce = None
    kl = None
    for mu, lv, h in zip(sample.mu, sample.log_var, sample.h):
        bce_j = recon_loss(decode_logits(h, sample.block_sizes), adjs)
        kl_j = kl_gaussian(mu, lv)
        bce = bce_j if bce is None else ad.add(bce, bce_j)
        kl = kl_j if kl is None else ad.add(kl, kl_j)
    scale = ad.Tensor(1.0 / spec.num_psi)
    bce = ad.mul(bce, scale)
    kl = ad.mul(kl, scale)
    loss = ad.add(bce, kl)
    if not np.isfinite(loss.value):
        raise NumericError("generator objective is not finite")
    return ElboResult(loss=loss, kl=kl, recon=ad.neg(bce))


def threshold_edges(sample: GeneratedSample, gamma) -> GeneratedSample:
    """Drop edge probabilities below gamma; survivors keep their value."""
    if not 0.0 <= gamma <= 1.0:
        raise InputError(f"gamma must be in [0, 1], got {gamma}")
    probs, adjs = [], []
    for p in sample.edge_probs:
        kept = p * (p >= gamma)
        np.fill_diagonal(kept, 0.0)
        probs.append(kept)
        adjs.append((kept > 0).astype(np.float64))
    return GeneratedSample(
        edge_probs=probs,
        thresholded_adj=adjs,
        block_sizes=sample.block_sizes.copy(),
        link_labels=sample.link_labels.copy(),
        target_indices=list(sample.target_indices),
        block_features=list(sample.block_features),
        gamma=float(gamma),
    )


def generate(
    params: SiviParams,
    batch: LabeledSubgraphBatch,
    spec: NoiseSpec,
    gamma,
    rng,
    zero_labels=False,
    zero_noise=False,
) -> GeneratedSample:
    """One mixing draw end to end: encode, reparameterize, decode, threshold."""
    one_draw = replace(spec, num_psi=1)
    sample = encode_semi_implicit(
        params, batch, one_draw, rng, zero_labels=zero_labels, zero_noise=zero_noise
    )
    sample = reparameterize(sample, rng)
    raw = decode_node_aware(
        sample.h[0],
        sample.block_sizes,
        sample.target_indices,
        link_labels=sample.link_labels,
        block_features=[b.local_features for b in batch.blocks],
    )
    return threshold_edges(raw, gamma)


# ---------------------------------------------------------------------------
# Pre-training


@dataclass
class GgmTrainConfig:
    epochs: int = 2000
    patience: int = 100
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    hop_k: int = 1
    max_nodes: int = 1000

    def __post_init__(self):
        if self.epochs < 1:
            raise InputError("epochs must be >= 1")
        if self.patience > self.epochs:
            raise InputError("patience must be <= epochs")


@dataclass
class GgmPretrainResult:
    params: SiviParams
    trace: list
    best_epoch: int
    best_loss: float
    final_kl: float


def pretrain_ggm(
    g: Graph, split: DatasetSplit, cfg: GgmTrainConfig, spec: NoiseSpec
) -> GgmPretrainResult:
    """Fit the auto-encoder on labeled subgraphs of the train positives.

    g must be the training-visible graph. Early stopping on loss plateau;
    the returned final_kl is the draw-averaged KL at the best epoch, which
    co-training uses to center its divergence target.
    """
    links = [Edge(int(u), int(v), POSITIVE) for u, v in split.train_pos]
    subs = extract_for_links(
        g, links, k=cfg.hop_k, max_nodes=cfg.max_nodes, seed=cfg.seed
    )
    d_in = g.features.shape[1]
    params = init_sivi_params(
        d_in, noise_dim=spec.noise_dim, rng=stream_rng(cfg.seed, "init")
    )
    state = ad.AdamState(lr=cfg.lr)
    best = params.copy()
    best_loss = np.inf
    best_epoch = 0
    best_kl = 0.0
    trace = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = stream_rng(cfg.seed, f"ggm.shuffle.e{epoch}").permutation(len(subs))
        size = cfg.batch_size if cfg.batch_size > 0 else len(subs)
        losses, kls = [], []
        for bi in range(0, len(subs), size):
            batch = make_batch([subs[i] for i in order[bi : bi + size]])
            tape = ad.Tape()
            leaves = tape.leaves(params.named())
            rng = stream_rng(cfg.seed, f"ggm.noise.e{epoch}.b{bi}")
            result = sivi_elbo(params, batch, spec, rng, leaves=leaves)
            grads = ad.backward(result.loss).named(leaves)
            ad.adam_step(state, params.named(), grads)
            losses.append(result.loss.item())
            kls.append(result.kl.item())
        epoch_loss = float(np.mean(losses))
        epoch_kl = float(np.mean(kls))
        trace.append(
            {
                "epoch": epoch,
                "loss": epoch_loss,
                "kl": epoch_kl,
                "seconds": time.perf_counter() - t0,
            }
        )
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            best = params.copy()
            best_epoch = epoch
            best_kl = epoch_kl
        if epoch - best_epoch >= cfg.patience:
            break
    return GgmPretrainResult(
        params=best,
        trace=trace,
        best_epoch=best_epoch,
        best_loss=best_loss,
        final_kl=best_kl,
    )


def save_ggm_checkpoint(path, params: SiviParams, adam=None, extra_meta: dict = None):
    named = {**params.named(), **params.meta()}
    for key, val in (extra_meta or {}).items():
        named[f"meta.{key}"] = np.atleast_1d(np.asarray(val, dtype=np.float64))
    ad.save_checkpoint(path, named, adam=adam)


def load_ggm_checkpoint(path):
    named, adam = ad.load_checkpoint(path)
    meta = {k[5:]: float(v[0]) for k, v in named.items() if k.startswith("meta.")}
    return SiviParams.from_named(named), meta, adam


# ---------------------------------------------------------------------------
# Sample dumps


def dump_samples(samples, path):
    """JSON dump: block sizes, thresholded edge lists with probabilities,
    link labels."""
    doc = {"samples": []}
    for s in samples if isinstance(samples, list) else [samples]:
        for b in range(s.num_blocks):
            p = s.edge_probs[b]
            iu, ju = np.nonzero(np.triu(s.thresholded_adj[b], 1))
            doc["samples"].append(
                {
                    "block_size": int(s.block_sizes[b]),
                    "label": int(s.link_labels[b]),
                    "target": [int(s.target_indices[b][0]), int(s.target_indices[b][1])],
                    "gamma": s.gamma,
                    "edges": [
                        [int(i), int(j), float(p[i, j])] for i, j in zip(iu, ju)
                    ],
                }
            )
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_samples(path):
    """Rebuild (adjacency, target, label) triples from a sample dump."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    out = []
    for rec in doc["samples"]:
        m = rec["block_size"]
        adj = np.zeros((m, m))
        probs = np.zeros((m, m))
        for i, j, p in rec["edges"]:
            adj[i, j] = adj[j, i] = 1.0
            probs[i, j] = probs[j, i] = p
        out.append(
            {
                "block_size": m,
                "adjacency": adj,
                "probs": probs,
                "target": tuple(rec["target"]),
                "label": rec["label"],
                "gamma": rec.get("gamma", 0.0),
            }
        )
    return out
