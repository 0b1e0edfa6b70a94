"""Acceptance gate: every criterion at its stated tolerance, one line each.

Heavier criteria share one pipeline cache (graph fixed, pipeline seed
varied) so the whole module stays well inside its runtime budgets.
"""

import time

import numpy as np
import pytest

from counterlink import autodiff as ad
from counterlink.analysis import (
    cn_distribution,
    degree_bias_scan,
    link_heuristic_histogram,
    samples_from_generated,
)
from counterlink.cotrain import (
    CotrainConfig,
    ablation_run,
    cotrain_losses,
    flex_objective,
    flex_tune,
    gen_loss,
    generate_samples,
)
from counterlink.generator import (
    GgmTrainConfig,
    NoiseSpec,
    SiviParams,
    generate,
    init_sivi_params,
    pretrain_ggm,
    sivi_elbo,
    threshold_edges,
)
from counterlink.gnn import (
    TrainConfig,
    evaluate_hits,
    gcn_forward,
    hits_at_k,
    init_gcn_params,
    lp_loss,
    normalize_adjacency,
    pretrain_gnn,
    score_pairs,
)
from counterlink.graphs import Edge, Graph, extract_for_links, make_batch
from counterlink.rng import stream_rng
from counterlink.splits import SplitSpec, generate_split, verify_split
from counterlink.synth import sbm_edges

from test_autodiff import finite_diff, max_rel_err
from vgae_reference import ReferenceVgae, normalize_dense


def report(num, desc, cond, detail=""):
    status = "PASS" if cond else "FAIL"
    print(f"[ACCEPTANCE] criterion {num:2d} {status}: {desc} {detail}".rstrip())
    assert cond, f"criterion {num} ({desc}) {detail}"


def hetero_sbm(n, sizes, p_in_list, p_out, seed):
    rng = stream_rng(seed, "synth")
    edges = sbm_edges(sizes, p_in_list, p_out, rng)
    return Graph.from_edge_array(n, edges, np.eye(n))


# fixed 300-node graphs whose six splits are verified non-degenerate
GRAPH_CNPA = hetero_sbm(300, [150, 150], [0.10, 0.028], 0.004, 0)
GRAPH_SP = hetero_sbm(300, [150, 150], [0.0135, 0.0135], 0.0006, 0)

NOISE = NoiseSpec(noise_dim=8, num_psi=2)
_PIPELINES = {}
_PIPELINE_SECONDS = []


def pipeline(direction, seed):
    """Split + both pretrains + co-tuning on the fixed CN graph; cached."""
    key = (direction, seed)
    if key in _PIPELINES:
        return _PIPELINES[key]
    t0 = time.perf_counter()
    t1, t2 = (2, 1) if direction == "backward" else (1, 2)
    split = generate_split(GRAPH_CNPA, SplitSpec("CN", direction, t1, t2, seed=seed))
    obs = split.observed_graph
    gnn = pretrain_gnn(
        obs, split,
        TrainConfig(epochs=80, patience=20, lr=1e-2, dropout=0.1, seed=seed,
                    eval_k=20),
        hidden=32, layers=2,
    )
    ggm = pretrain_ggm(
        obs, split,
        GgmTrainConfig(epochs=40, patience=40, lr=1e-2, batch_size=128, seed=seed),
        NOISE,
    )
    a_norm = normalize_adjacency(obs.adjacency)
    base_test = evaluate_hits(gnn.params, a_norm, obs.features, split.test_pos,
                              split.test_neg, 20)
    cfg = CotrainConfig(alpha=1.05, gamma=0.9, lr_gnn=1e-4, lr_ggm=1e-3,
                        epochs=3, patience=3, batch_size=128, noise=NOISE,
                        eval_k=20, seed=seed)
    flex = flex_tune(gnn.params, ggm.params, obs, split, cfg)
    flex_test = evaluate_hits(flex.gnn, a_norm, obs.features, split.test_pos,
                              split.test_neg, 20)
    out = {
        "split": split, "obs": obs, "gnn": gnn, "ggm": ggm, "cfg": cfg,
        "flex": flex, "base_test": base_test, "flex_test": flex_test,
    }
    _PIPELINES[key] = out
    _PIPELINE_SECONDS.append(time.perf_counter() - t0)
    return out


# ---------------------------------------------------------------------------


def test_criterion_01_gradient_fidelity():
    started = time.perf_counter()
    worst = {}

    # L_LP on a small graph
    rng = np.random.default_rng(3)
    a = (rng.random((12, 12)) < 0.3).astype(float)
    a = np.triu(a, 1)
    a = a + a.T
    small = Graph.from_edge_array(12, np.stack(np.nonzero(np.triu(a, 1)), 1),
                                  rng.standard_normal((12, 4)))
    a_norm = normalize_adjacency(small.adjacency)
    pos = np.array([[0, 1], [2, 3], [4, 5]])
    neg = np.array([[0, 7], [1, 9]])
    gnn_arrays = init_gcn_params(4, hidden=6, layers=2, dropout=0.0,
                                 rng=np.random.default_rng(5))

    def lp_run(arrs, collect=False):
        params = init_gcn_params(4, hidden=6, layers=2, dropout=0.0,
                                 rng=np.random.default_rng(5))
        tape = ad.Tape()
        leaves = tape.leaves(arrs)
        h = gcn_forward(params, a_norm, small.features, leaves=leaves)
        loss = lp_loss(score_pairs(h, pos), score_pairs(h, neg))
        if collect:
            return ad.backward(loss).named(leaves)
        return loss.item()

    arrays = gnn_arrays.named()
    worst["L_LP"] = max_rel_err(lp_run(arrays, collect=True),
                                finite_diff(lambda x: lp_run(x), arrays))

    # shared small batch, <= 20 nodes total
    edges = small.edges()
    links = [Edge(int(u), int(v)) for u, v in edges[:3]]
    subs = extract_for_links(small, links, k=1, max_nodes=6, seed=2)
    batch = make_batch(subs)
    assert batch.total_nodes <= 20
    spec = NoiseSpec(noise_dim=3, num_psi=2)
    ggm_arrays = init_sivi_params(4, hidden=8, zdim=4, noise_dim=3,
                                  rng=np.random.default_rng(7)).named()

    def build_sivi(arrs):
        return SiviParams(
            w_in=arrs["ggm.w_in"], b_in=arrs["ggm.b_in"],
            w_mu=arrs["ggm.w_mu"], b_mu=arrs["ggm.b_mu"],
            w_lv=arrs["ggm.w_lv"], b_lv=arrs["ggm.b_lv"],
            hidden=8, zdim=4, noise_dim=3,
        )

    def sivi_run(arrs, collect=False):
        tape = ad.Tape()
        leaves = tape.leaves(arrs)
        res = sivi_elbo(build_sivi(arrs), batch, spec, stream_rng(11, "fd"),
                        leaves=leaves)
        if collect:
            return ad.backward(res.loss).named(leaves)
        return res.loss.item()

    worst["L_SIVI"] = max_rel_err(sivi_run(ggm_arrays, collect=True),
                                  finite_diff(lambda x: sivi_run(x), ggm_arrays))

    def gen_run(arrs, collect=False):
        tape = ad.Tape()
        leaves = tape.leaves(arrs)
        res = sivi_elbo(build_sivi(arrs), batch, spec, stream_rng(11, "fd"),
                        leaves=leaves)
        g = gen_loss(ad.neg(res.loss), res.kl, 1.5)
        if collect:
            return ad.backward(g).named(leaves)
        return g.item()

    worst["L_GEN"] = max_rel_err(gen_run(ggm_arrays, collect=True),
                                 finite_diff(lambda x: gen_run(x), ggm_arrays))

    # L_Flex through the full co-training forward, both parameter sets
    for gamma in (0.0, 0.6):
        cfg = CotrainConfig(alpha=1.05, gamma=gamma, noise=spec, epochs=1,
                            patience=1)
        joint = {**ggm_arrays, **arrays}

        def flex_run(arrs, collect=False):
            gnn_p = init_gcn_params(4, hidden=6, layers=2, dropout=0.0,
                                    rng=np.random.default_rng(5))
            gnn_p.weights = [arrs["gnn.w0"], arrs["gnn.w1"]]
            gnn_p.biases = [arrs["gnn.b0"], arrs["gnn.b1"]]
            bundle = cotrain_losses(gnn_p, build_sivi(arrs), batch, cfg,
                                    tau=1.5, rng=stream_rng(13, "fd"))
            objective = flex_objective(bundle.lp, bundle.gen, cfg.alpha)
            if collect:
                grads = ad.backward(objective)
                return {**grads.named(bundle.ggm_leaves),
                        **grads.named(bundle.gnn_leaves)}
            return objective.item()

        if gamma > 0.0:
            # keep finite differences away from the indicator boundary
            probe = cotrain_losses(
                init_gcn_params(4, hidden=6, layers=2, dropout=0.0,
                                rng=np.random.default_rng(5)),
                build_sivi(ggm_arrays), batch, cfg, tau=1.5,
                rng=stream_rng(13, "fd"),
            )
            del probe
        worst[f"L_Flex(gamma={gamma})"] = max_rel_err(
            flex_run(joint, collect=True),
            finite_diff(lambda x: flex_run(x), joint),
        )

    elapsed = time.perf_counter() - started
    ok = all(v < 1e-4 for v in worst.values()) and elapsed < 60
    report(1, "gradient fidelity vs central finite differences", ok,
           f"(max rel errs {({k: float(f'{v:.2e}') for k, v in worst.items()})}, "
           f"{elapsed:.1f}s)")


def test_criterion_02_split_soundness():
    started = time.perf_counter()
    cases = [
        (GRAPH_CNPA, "CN", "forward", 1, 2),
        (GRAPH_CNPA, "CN", "backward", 2, 1),
        (GRAPH_SP, "SP", "forward", 17, 26),
        (GRAPH_SP, "SP", "backward", 26, 17),
        (GRAPH_CNPA, "PA", "forward", 100, 50),
        (GRAPH_CNPA, "PA", "backward", 50, 100),
    ]
    total_violations = 0
    for g, heur, direction, t1, t2 in cases:
        split = generate_split(g, SplitSpec(heur, direction, t1, t2, seed=1))
        rep = verify_split(g, split)
        total_violations += len(rep.violations)
        assert all(rep.bucket_counts[b] > 0 for b in ("train", "valid", "test"))
    elapsed = time.perf_counter() - started
    report(2, "all 6 split combinations verify clean on 300-node graphs",
           total_violations == 0 and elapsed < 60,
           f"({total_violations} violations, {elapsed:.1f}s)")


def test_criterion_03_labeling_and_batching():
    started = time.perf_counter()
    rng = np.random.default_rng(9)
    bad_labels = 0
    bad_blocks = 0
    pending = []
    total = 0
    while total < 1000:
        n = int(rng.integers(8, 40))
        a = (rng.random((n, n)) < 0.25).astype(float)
        a = np.triu(a, 1)
        a = a + a.T
        g = Graph.from_edge_array(n, np.stack(np.nonzero(np.triu(a, 1)), 1),
                                  np.eye(n))
        for _ in range(min(20, 1000 - total)):
            u, v = rng.choice(n, size=2, replace=False)
            sub = extract_enclosing(g, int(u), int(v), rng)
            total += 1
            labels_ok = (
                sub.labels.sum() == 2.0
                and sub.labels[sub.target[0]] == 1.0
                and sub.labels[sub.target[1]] == 1.0
                and sub.node_map[sub.target[0]] == u
                and sub.node_map[sub.target[1]] == v
            )
            bad_labels += 0 if labels_ok else 1
            pending.append(sub)
            if len(pending) >= 8:
                batch = make_batch(pending)
                dense = batch.to_dense_adjacency()
                off = 0
                for s in pending:
                    m = s.num_nodes
                    dense[off : off + m, off : off + m] = 0.0
                    off += m
                bad_blocks += 0 if dense.sum() == 0.0 else 1
                pending = []
    elapsed = time.perf_counter() - started
    report(3, "1000 extractions labeled correctly, batches block-isolated",
           bad_labels == 0 and bad_blocks == 0 and elapsed < 60,
           f"({bad_labels} label faults, {bad_blocks} leaky batches, {elapsed:.1f}s)")


def extract_enclosing(g, u, v, rng):
    from counterlink.graphs import extract_enclosing_subgraph

    return extract_enclosing_subgraph(
        g, Edge(u, v), k=int(rng.integers(1, 3)), max_nodes=25,
        rng=np.random.default_rng(int(rng.integers(0, 2**31))),
    )


GAMMA_GRID = (0.0, 0.25, 0.5, 0.75, 0.9, 0.9999)


def test_criterion_04_threshold_behavior():
    rng = np.random.default_rng(21)
    g = hetero_sbm(40, [20, 20], [0.4, 0.4], 0.05, 3)
    links = [Edge(int(u), int(v)) for u, v in g.edges()[:6]]
    batch = make_batch(extract_for_links(g, links, k=1, max_nodes=15, seed=1))
    params = init_sivi_params(g.features.shape[1], hidden=8, zdim=4, noise_dim=3,
                              rng=rng)
    base = generate(params, batch, NoiseSpec(noise_dim=3, num_psi=1), 0.0,
                    stream_rng(2, "gen"))

    counts = [threshold_edges(base, gm).edge_count() for gm in GAMMA_GRID]
    monotone = counts == sorted(counts, reverse=True)

    ident = threshold_edges(base, 0.0)
    identity_ok = all(
        np.array_equal(a, b) for a, b in zip(ident.edge_probs, base.edge_probs)
    )

    idempotent = True
    for gm in GAMMA_GRID:
        once = threshold_edges(base, gm)
        twice = threshold_edges(once, gm)
        idempotent &= all(
            np.array_equal(a, b) for a, b in zip(once.edge_probs, twice.edge_probs)
        ) and all(
            np.array_equal(a, b)
            for a, b in zip(once.thresholded_adj, twice.thresholded_adj)
        )
    report(4, "threshold is monotone over the gamma grid, identity at 0, idempotent",
           monotone and identity_ok and idempotent, f"(edge counts {counts})")


def test_criterion_05_degenerate_reduction():
    g = hetero_sbm(40, [20, 20], [0.4, 0.4], 0.05, 5)
    links = [Edge(int(u), int(v)) for u, v in g.edges()[:8]]
    batch = make_batch(extract_for_links(g, links, k=1, max_nodes=12, seed=3))
    spec = NoiseSpec(noise_dim=0, num_psi=1)
    params = init_sivi_params(g.features.shape[1], hidden=8, zdim=4, noise_dim=0,
                              rng=np.random.default_rng(11))
    ref = ReferenceVgae({k.split(".")[1]: v.copy() for k, v in params.named().items()},
                        lr=1e-2)
    x_in = np.concatenate(
        [batch.stacked_features(), batch.stacked_labels().reshape(-1, 1)], axis=1
    )
    a_norm_ref = normalize_dense(batch.to_dense_adjacency())

    state = ad.AdamState(lr=1e-2)
    gaps = []
    for step in range(1, 6):
        tape = ad.Tape()
        leaves = tape.leaves(params.named())
        res = sivi_elbo(params, batch, spec, stream_rng(17, f"step{step}"),
                        leaves=leaves)
        grads = ad.backward(res.loss).named(leaves)
        ad.adam_step(state, params.named(), grads)

        ref_loss = ref.train_step(a_norm_ref, x_in, batch.block_sizes,
                                  batch.block_adjacencies(),
                                  stream_rng(17, f"step{step}"))
        gaps.append(abs(res.loss.item() - ref_loss))
    report(5, "one-draw zero-noise losses equal an independent plain VGAE",
           max(gaps) < 1e-10, f"(per-step gaps max {max(gaps):.2e})")


def test_criterion_06_degree_bias_replication():
    started = time.perf_counter()
    pipe = pipeline("backward", 0)
    split, obs = pipe["split"], pipe["obs"]
    links = [Edge(int(u), int(v)) for u, v in split.train_pos]
    subs = extract_for_links(obs, links, k=1, max_nodes=1000, seed=0)
    slopes = {}
    for gamma in (0.0, 0.9999):
        records = []
        for bi in range(0, len(subs), 128):
            batch = make_batch(subs[bi : bi + 128])
            sample = generate(pipe["ggm"].params, batch, NOISE, gamma,
                              stream_rng(0, f"bias.b{bi}"))
            records.extend(samples_from_generated(sample))
        slopes[gamma] = degree_bias_scan(records).slope
    elapsed = time.perf_counter() - started
    ok = slopes[0.0] >= 5 * slopes[0.9999] and slopes[0.0] > 0 and elapsed < 600
    report(6, "mean-CN-vs-size slope at gamma=0 at least 5x the 0.9999 slope", ok,
           f"(slopes {slopes[0.0]:.3f} vs {slopes[0.9999]:.3f}, {elapsed:.1f}s)")


def test_criterion_07_structural_alignment():
    started = time.perf_counter()
    wins = 0
    details = []
    for seed in (0, 1, 2):
        pipe = pipeline("backward", seed)
        split, obs, cfg = pipe["split"], pipe["obs"], pipe["cfg"]
        samples = generate_samples(pipe["flex"].ggm, obs, split, cfg,
                                   bucket="train")
        records = [r for s in samples for r in samples_from_generated(s)]
        gen_mean = cn_distribution(records).mean
        train_mean = link_heuristic_histogram(
            GRAPH_CNPA, split.train_pos, "CN", "train").mean
        valid_mean = link_heuristic_histogram(
            GRAPH_CNPA, split.valid_pos, "CN", "valid").mean
        gen_gap = abs(gen_mean - valid_mean)
        train_gap = abs(train_mean - valid_mean)
        wins += int(gen_gap < train_gap)
        details.append(f"seed{seed}: {gen_gap:.3f}<" f"{train_gap:.3f}")
    elapsed = time.perf_counter() - started
    report(7, "generated CN closer to valid than train in >=2 of 3 seeds",
           wins >= 2 and elapsed < 900, f"({wins}/3; {'; '.join(details)})")


def test_criterion_08_end_to_end_benefit():
    wins = {}
    for direction in ("backward", "forward"):
        wins[direction] = sum(
            pipeline(direction, seed)["flex_test"]
            >= pipeline(direction, seed)["base_test"]
            for seed in (0, 1, 2)
        )
    total_seconds = sum(_PIPELINE_SECONDS)
    ok = all(w >= 2 for w in wins.values()) and total_seconds < 1800
    report(8, "co-tuned test Hits@20 >= baseline in >=2 of 3 seeds per split", ok,
           f"(backward {wins['backward']}/3, forward {wins['forward']}/3, "
           f"pipelines {total_seconds:.0f}s)")


def test_criterion_09_ablation_ordering():
    scores = {switch: [] for switch in (None, "no_lp_loss", "no_sivi",
                                        "no_seal_labels")}
    for seed in (0, 1, 2):
        pipe = pipeline("backward", seed)
        split, obs, cfg = pipe["split"], pipe["obs"], pipe["cfg"]
        for switch in scores:
            if switch is None:
                scores[switch].append(pipe["flex_test"])
            else:
                out = ablation_run(pipe["gnn"].params, pipe["ggm"].params, obs,
                                   split, cfg, switch=switch)
                scores[switch].append(out.test_hits)
    means = {switch: float(np.mean(v)) for switch, v in scores.items()}
    full = means[None]
    ok = all(full >= means[s] for s in ("no_lp_loss", "no_sivi", "no_seal_labels"))
    report(9, "full co-training >= every single-mechanism ablation", ok,
           f"(means full {full:.4f}, " + ", ".join(
               f"{s} {means[s]:.4f}" for s in scores if s) + ")")


def test_criterion_10_evaluator_oracle():
    def oracle(pos, neg, k):
        threshold = sorted(neg, reverse=True)[k - 1]
        return sum(1 for p in pos if p > threshold) / len(pos)

    rng = np.random.default_rng(23)
    mismatches = 0
    for _ in range(1000):
        npos = int(rng.integers(1, 30))
        nneg = int(rng.integers(1, 50))
        k = int(rng.integers(1, nneg + 1))
        pos = rng.standard_normal(npos)
        # ties exercised deliberately
        neg = np.round(rng.standard_normal(nneg), 1)
        if hits_at_k(pos, neg, k) != oracle(pos.tolist(), neg.tolist(), k):
            mismatches += 1
    report(10, "hits@k equals the brute-force ranking oracle on 1000 sets",
           mismatches == 0, f"({mismatches} mismatches)")
