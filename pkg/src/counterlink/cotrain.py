"""Adversarial co-training of the link predictor and the generator.

Each mini-batch of labeled subgraphs flows twice: the generator produces
thresholded samples, the predictor scores every block's original link label
on its generated adjacency (propagating over thresholded edge probabilities
so gradients reach the generator), and the two parameter sets update
alternately. The predictor always descends the weighted classification
loss. The generator ascends its own objective, whose quadratic penalty
pins the posterior divergence near a target value; in check mode it also
descends the classification loss so prediction quality stays a check on
generation, while literal min-max mode ascends the full combined objective.

Model selection is validation Hits@K with the pre-update state included as
a candidate, since over-tuning degrades quickly here.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, InputError, NumericError
from .generator import (
    NoiseSpec,
    SiviParams,
    decode_logits,
    encode_semi_implicit,
    kl_gaussian,
    recon_loss,
    reparameterize,
)
from .gnn import (
    GcnParams,
    evaluate_hits,
    gcn_forward,
    lp_loss,
    normalize_adjacency,
    normalize_dense_adjacency,
)
from .graphs import Edge, Graph, NEGATIVE, POSITIVE, extract_for_links, make_batch
from .rng import stream_rng
from .splits import DatasetSplit

UPDATE_RULES = ("check_mode", "literal_minmax")
ABLATION_SWITCHES = ("no_seal_labels", "no_lp_loss", "no_sivi")


@dataclass(frozen=True)
class CotrainConfig:
    alpha: float = 1.05
    tau: float = None
    tau_offset: float = 1.0
    gamma: float = 0.9
    lr_gnn: float = 1e-5
    lr_ggm: float = 1e-5
    epochs: int = 5
    batch_size: int = 64
    patience: int = 2
    update_rule: str = "check_mode"
    seed: int = 0
    eval_k: int = 20
    hop_k: int = 1
    max_nodes: int = 1000
    mix_ratio: float = 0.0
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    zero_labels: bool = False
    zero_noise: bool = False

    def __post_init__(self):
        if self.alpha < 0:
            raise InputError("alpha must be >= 0")
        if self.tau is not None and self.tau < 0:
            raise InputError("tau must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise InputError("gamma must be in [0, 1]")
        if self.update_rule not in UPDATE_RULES:
            raise ConfigError(f"update_rule must be one of {UPDATE_RULES}")
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise InputError("mix_ratio must be in [0, 1]")
        if self.patience > self.epochs:
            raise InputError("patience must be <= epochs")


def gen_loss(elbo, kl_estimate, tau):
    """Generator objective: evidence bound minus (KL - tau) squared.

    The penalty vanishes at the target and is symmetric around it, so
    ascent drives the draw-averaged divergence toward tau.
    """
    elbo = elbo if isinstance(elbo, ad.Tensor) else ad.Tensor(elbo)
    kl = kl_estimate if isinstance(kl_estimate, ad.Tensor) else ad.Tensor(kl_estimate)
    return ad.sub(elbo, ad.square(ad.sub(kl, ad.Tensor(float(tau)))))


def flex_objective(lp, gen, alpha):
    """alpha * classification loss + generator objective, nothing hidden."""
    lp = lp if isinstance(lp, ad.Tensor) else ad.Tensor(lp)
    gen = gen if isinstance(gen, ad.Tensor) else ad.Tensor(gen)
    return ad.add(ad.mul(lp, ad.Tensor(float(alpha))), gen)


@dataclass
class LossBundle:
    lp: ad.Tensor
    sivi_loss: ad.Tensor
    kl: ad.Tensor
    elbo: ad.Tensor
    gen: ad.Tensor
    penalty: float
    mean_generated_cn: float
    gnn_leaves: dict
    ggm_leaves: dict


def cotrain_losses(
    gnn_params: GcnParams,
    ggm_params: SiviParams,
    batch,
    cfg: CotrainConfig,
    tau: float,
    rng,
    use_original_adjacency: bool = False,
) -> LossBundle:
    """One joint forward pass on a batch; both loss sides share the tape.

    The predictor runs per block over the generated weighted adjacency
    (original block adjacency when mixing in original views), scores the
    target endpoints, and the batch's link labels are the BCE targets.
    """
    tape = ad.Tape()
    ggm_leaves = tape.leaves(ggm_params.named())
    gnn_leaves = tape.leaves(gnn_params.named())

    sample = encode_semi_implicit(
        ggm_params, batch, cfg.noise, rng,
        zero_labels=cfg.zero_labels, zero_noise=cfg.zero_noise, leaves=ggm_leaves,
    )
    sample = reparameterize(sample, rng)
    adjs = batch.block_adjacencies()
    bce = None
    kl = None
    gen_logit_blocks = None
    for j, (mu, lv, h) in enumerate(zip(sample.mu, sample.log_var, sample.h)):
        logit_blocks = decode_logits(h, sample.block_sizes)
        if j == 0:
            gen_logit_blocks = logit_blocks
        bce_j = recon_loss(logit_blocks, adjs)
        kl_j = kl_gaussian(mu, lv)
        bce = bce_j if bce is None else ad.add(bce, bce_j)
        kl = kl_j if kl is None else ad.add(kl, kl_j)
    scale = ad.Tensor(1.0 / cfg.noise.num_psi)
    bce = ad.mul(bce, scale)
    kl = ad.mul(kl, scale)
    sivi_loss = ad.add(bce, kl)
    elbo = ad.neg(sivi_loss)
    gen = gen_loss(elbo, kl, tau)
    penalty = float((kl.value - tau) ** 2)

    logits, cns = [], []
    for b, block in enumerate(batch.blocks):
        m = block.num_nodes
        if use_original_adjacency:
            prop = normalize_dense_adjacency(ad.Tensor(block.local_adjacency))
            thresholded = block.local_adjacency
        else:
            p = ad.sigmoid(gen_logit_blocks[b])
            mask = (p.value >= cfg.gamma).astype(np.float64)
            np.fill_diagonal(mask, 0.0)
            kept = ad.mul(p, ad.Tensor(mask))
            prop = normalize_dense_adjacency(kept)
            thresholded = mask
        emb = gcn_forward(gnn_params, prop, block.local_features, leaves=gnn_leaves)
        hu = ad.gather_rows(emb, np.array([block.target[0]]))
        hv = ad.gather_rows(emb, np.array([block.target[1]]))
        logits.append(ad.tsum(ad.mul(hu, hv), axis=1))
        cns.append(float((thresholded[block.target[0]] * thresholded[block.target[1]]).sum()))
    joined = ad.concat(logits, axis=0)
    labels = batch.batch_labels
    pos_idx = np.nonzero(labels == POSITIVE)[0]
    neg_idx = np.nonzero(labels == NEGATIVE)[0]
    lp = lp_loss(
        ad.gather_rows(joined, pos_idx) if pos_idx.size else None,
        ad.gather_rows(joined, neg_idx) if neg_idx.size else None,
    )
    for name, t in (("classification", lp), ("generation", sivi_loss)):
        if not np.isfinite(t.value):
            raise NumericError(f"{name} loss is not finite")
    return LossBundle(
        lp=lp,
        sivi_loss=sivi_loss,
        kl=kl,
        elbo=elbo,
        gen=gen,
        penalty=penalty,
        mean_generated_cn=float(np.mean(cns)),
        gnn_leaves=gnn_leaves,
        ggm_leaves=ggm_leaves,
    )


def gnn_step(bundle: LossBundle, state: ad.AdamState, params: GcnParams, alpha: float):
    """Descend alpha * classification loss on the predictor only."""
    loss = ad.mul(bundle.lp, ad.Tensor(float(alpha)))
    grads = ad.backward(loss).named(bundle.gnn_leaves)
    ad.adam_step(state, params.named(), grads)


def ggm_step(bundle: LossBundle, state: ad.AdamState, params: SiviParams, cfg: CotrainConfig):
    """Ascend the generator objective per the configured update rule."""
    if cfg.update_rule == "check_mode":
        # ascend gen, descend alpha*lp
        descend = ad.sub(ad.mul(bundle.lp, ad.Tensor(cfg.alpha)), bundle.gen)
    else:
        # literal min-max: ascend alpha*lp + gen
        descend = ad.neg(flex_objective(bundle.lp, bundle.gen, cfg.alpha))
    grads = ad.backward(descend).named(bundle.ggm_leaves)
    ad.adam_step(state, params.named(), grads)


def resolve_tau(ggm_params, probe_batch, cfg: CotrainConfig) -> float:
    """Explicit tau, or the pre-trained posterior's KL plus the offset."""
    if cfg.tau is not None:
        return float(cfg.tau)
    sample = encode_semi_implicit(
        ggm_params, probe_batch, cfg.noise, stream_rng(cfg.seed, "cot.tau"),
        zero_labels=cfg.zero_labels, zero_noise=cfg.zero_noise,
    )
    kls = [kl_gaussian(mu, lv).item() for mu, lv in zip(sample.mu, sample.log_var)]
    return float(np.mean(kls)) + cfg.tau_offset


@dataclass
class CotrainResult:
    gnn: GcnParams
    ggm: SiviParams
    trace: list
    best_epoch: int
    best_valid: float
    tau: float


def flex_tune(
    gnn_params: GcnParams,
    ggm_params: SiviParams,
    g: Graph,
    split: DatasetSplit,
    cfg: CotrainConfig,
    eval_graph: Graph = None,
) -> CotrainResult:
    """Alternate predictor and generator updates over generated samples.

    g is the training-visible graph; the evaluation adjacency defaults to
    it. Returns the best-validation pair, which may be the untouched
    pre-trained models when no epoch improves.
    """
    gnn_params = gnn_params.copy()
    ggm_params = ggm_params.copy()
    links = [Edge(int(u), int(v), POSITIVE) for u, v in split.train_pos] + [
        Edge(int(u), int(v), NEGATIVE) for u, v in split.train_neg
    ]
    subs = extract_for_links(
        g, links, k=cfg.hop_k, max_nodes=cfg.max_nodes, seed=cfg.seed
    )
    eval_norm = normalize_adjacency(
        (eval_graph if eval_graph is not None else g).adjacency
    )
    feats = g.features
    size = cfg.batch_size if cfg.batch_size > 0 else len(subs)
    tau = resolve_tau(ggm_params, make_batch(subs[: min(size, len(subs))]), cfg)

    state_gnn = ad.AdamState(lr=cfg.lr_gnn)
    state_ggm = ad.AdamState(lr=cfg.lr_ggm)
    best_valid = evaluate_hits(
        gnn_params, eval_norm, feats, split.valid_pos, split.valid_neg, cfg.eval_k
    )
    best = (gnn_params.copy(), ggm_params.copy())
    best_epoch = 0
    trace = [
        {
            "epoch": 0,
            "lp_loss": float("nan"),
            "sivi_loss": float("nan"),
            "kl_estimate": float("nan"),
            "penalty": float("nan"),
            "mean_generated_cn": float("nan"),
            "valid_hits": best_valid,
        }
    ]
    for epoch in range(1, cfg.epochs + 1):
        order = stream_rng(cfg.seed, f"cot.shuffle.e{epoch}").permutation(len(subs))
        mix_rng = stream_rng(cfg.seed, f"cot.mix.e{epoch}")
        rows = {"lp_loss": [], "sivi_loss": [], "kl_estimate": [], "penalty": [],
                "mean_generated_cn": []}
        for bi in range(0, len(subs), size):
            batch = make_batch([subs[i] for i in order[bi : bi + size]])
            original_view = bool(mix_rng.random() < cfg.mix_ratio)

            bundle = cotrain_losses(
                gnn_params, ggm_params, batch, cfg, tau,
                stream_rng(cfg.seed, f"cot.noise.e{epoch}.b{bi}.gnn"),
                use_original_adjacency=original_view,
            )
            gnn_step(bundle, state_gnn, gnn_params, cfg.alpha)

            bundle = cotrain_losses(
                gnn_params, ggm_params, batch, cfg, tau,
                stream_rng(cfg.seed, f"cot.noise.e{epoch}.b{bi}.ggm"),
                use_original_adjacency=original_view,
            )
            ggm_step(bundle, state_ggm, ggm_params, cfg)

            rows["lp_loss"].append(bundle.lp.item())
            rows["sivi_loss"].append(bundle.sivi_loss.item())
            rows["kl_estimate"].append(bundle.kl.item())
            rows["penalty"].append(bundle.penalty)
            rows["mean_generated_cn"].append(bundle.mean_generated_cn)
        valid_hits = evaluate_hits(
            gnn_params, eval_norm, feats, split.valid_pos, split.valid_neg, cfg.eval_k
        )
        trace.append(
            {"epoch": epoch, **{k: float(np.mean(v)) for k, v in rows.items()},
             "valid_hits": valid_hits}
        )
        if valid_hits > best_valid:
            best_valid = valid_hits
            best = (gnn_params.copy(), ggm_params.copy())
            best_epoch = epoch
        if epoch - best_epoch >= cfg.patience:
            break
    return CotrainResult(
        gnn=best[0], ggm=best[1], trace=trace, best_epoch=best_epoch,
        best_valid=best_valid, tau=tau,
    )


def generate_samples(
    ggm_params: SiviParams,
    g: Graph,
    split: DatasetSplit,
    cfg: CotrainConfig,
    bucket: str = "train",
):
    """Generated samples conditioned on one bucket's positive links."""
    from .generator import generate

    links = [Edge(int(u), int(v), POSITIVE) for u, v in split.pos(bucket)]
    subs = extract_for_links(
        g, links, k=cfg.hop_k, max_nodes=cfg.max_nodes, seed=cfg.seed
    )
    size = cfg.batch_size if cfg.batch_size > 0 else len(subs)
    out = []
    for bi in range(0, len(subs), size):
        batch = make_batch(subs[bi : bi + size])
        out.append(
            generate(
                ggm_params, batch, cfg.noise, cfg.gamma,
                stream_rng(cfg.seed, f"gen.{bucket}.b{bi}"),
                zero_labels=cfg.zero_labels, zero_noise=cfg.zero_noise,
            )
        )
    return out


@dataclass
class AblationResult:
    switch: str
    result: CotrainResult
    valid_hits: float
    test_hits: float


def ablation_run(
    gnn_params: GcnParams,
    ggm_params: SiviParams,
    g: Graph,
    split: DatasetSplit,
    cfg: CotrainConfig,
    switch: str = None,
    eval_graph: Graph = None,
) -> AblationResult:
    """Co-train with one mechanism removed; None runs the full pipeline.

    no_seal_labels zeroes the endpoint-label channel into the generator,
    no_lp_loss sets alpha to zero, no_sivi collapses to one mixing draw
    with zeroed noise. Everything else, including seeds, stays equal.
    """
    if switch is None:
        run_cfg = cfg
    elif switch == "no_seal_labels":
        run_cfg = replace(cfg, zero_labels=True)
    elif switch == "no_lp_loss":
        run_cfg = replace(cfg, alpha=0.0)
    elif switch == "no_sivi":
        run_cfg = replace(cfg, zero_noise=True, noise=replace(cfg.noise, num_psi=1))
    else:
        raise ConfigError(
            f"unknown ablation switch {switch!r}; expected one of {ABLATION_SWITCHES}"
        )
    result = flex_tune(gnn_params, ggm_params, g, split, run_cfg, eval_graph=eval_graph)
    eval_norm = normalize_adjacency(
        (eval_graph if eval_graph is not None else g).adjacency
    )
    test_hits = evaluate_hits(
        result.gnn, eval_norm, g.features, split.test_pos, split.test_neg, cfg.eval_k
    )
    return AblationResult(
        switch=switch or "full",
        result=result,
        valid_hits=result.best_valid,
        test_hits=test_hits,
    )
