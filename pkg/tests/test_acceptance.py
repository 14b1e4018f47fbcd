"""Acceptance criteria, one test each, every one printing a PASS/FAIL line.

The lines are also collected and repeated in the terminal summary.
"""

import math
import time

import numpy as np
import pytest
import torch

from camadv.adversary import Discriminator, GradientRouting
from camadv.config import ExperimentConfig
from camadv.data import DatasetSplit, Sample
from camadv.embedding import build_model
from camadv.evaluation import entropy, jsd_multi, mutual_information, retrieve_and_score
from camadv.harness import build_models, load_experiment_data
from camadv.objectives import (
    Batch,
    camera_adv_loss,
    conditional_camera_adv_loss,
    cross_entropy,
    id_loss,
    single_composition,
    triplet_loss,
)
from camadv.pseudo_labels import OUTLIER, PseudoLabeling, compute_centroids, permute
from camadv.training import adapt_target, pretrain_source

from .oracles import finite_difference_error, retrieval_brute_force, triplet_brute_force

RESULTS = []


def _report(number, title, passed, detail, elapsed, budget):
    within = elapsed < budget
    ok = bool(passed) and within
    line = f"[{'PASS' if ok else 'FAIL'}] acceptance {number}: {title} ({detail}; {elapsed:.1f}s of {budget:.0f}s)"
    RESULTS.append(line)
    print(line)
    assert passed, line
    assert within, line


def test_1_loss_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        n_ids = int(rng.integers(2, 9))
        k = int(rng.integers(2, 5))
        n = min(32, n_ids * k)
        labels = np.resize(np.repeat(np.arange(n_ids), k), n)
        if np.bincount(labels).min() < 2:
            labels[-1] = labels[0]
        rng.shuffle(labels)
        feats = rng.normal(size=(n, int(rng.integers(2, 9))))
        margin = float(rng.uniform(0.1, 1.0))
        got = float(triplet_loss(torch.as_tensor(feats), torch.as_tensor(labels), margin).value)
        worst = max(worst, abs(got - triplet_brute_force(feats, labels, margin)))
    ce_ok = True
    for k in (2, 4, 6, 751):
        uniform = torch.full((3, k), 1.0 / k, dtype=torch.float64)
        ce_ok &= abs(float(cross_entropy(uniform, torch.zeros(3, dtype=torch.long))) - math.log(k)) < 1e-12
        one_hot = torch.eye(k, dtype=torch.float64)
        ce_ok &= float(cross_entropy(one_hot, torch.arange(k))) == 0.0
    _report(1, "loss oracles", worst <= 1e-6 and ce_ok, f"max triplet error {worst:.2e}", time.perf_counter() - start, 60)


def test_2_gradient_suite():
    start = time.perf_counter()
    errors = {}
    zero_cond = True
    reversal_ok = True
    for seed in range(3):
        g = torch.Generator().manual_seed(seed)
        labels = torch.tensor([0, 0, 1, 1, 2, 2])
        cams = torch.tensor([0, 1, 2, 0, 1, 2])
        feats = torch.randn(6, 5, generator=g, dtype=torch.float64)
        logits = torch.randn(6, 3, generator=g, dtype=torch.float64)
        cents = torch.randn(3, 5, generator=g, dtype=torch.float64)[labels]
        plain = Discriminator(5, 3, hidden=16, seed=seed).double().eval()
        cond = Discriminator(5, 3, conditional=True, hidden=16, seed=seed).double().eval()
        for d in (plain, cond):
            with torch.no_grad():
                d.head.weight.normal_(0, 0.5, generator=g)
        checks = {
            "cross_entropy": (lambda x: cross_entropy(torch.softmax(x, 1), labels), logits),
            "triplet": (lambda x: triplet_loss(x, labels).value, feats),
            "id_loss": (lambda x: id_loss(torch.softmax(x[:, :3], 1), x, labels).value, feats),
            "camera_adv": (lambda x: camera_adv_loss(plain(x), cams).value, feats),
            "conditional_adv": (lambda x: conditional_camera_adv_loss(x, cents, cams, cond).value, feats),
        }
        for name, (fn, x) in checks.items():
            errors[name] = max(errors.get(name, 0.0), finite_difference_error(fn, x))

        c = cents.clone().requires_grad_(True)
        conditional_camera_adv_loss(feats.requires_grad_(True), c, cams, cond).value.backward()
        zero_cond &= bool(torch.equal(c.grad, torch.zeros_like(c)))

        model = build_model("feature", 5, input_dim=4, hidden=8, seed=seed).double()
        model.reset_pseudo_head(3, seed=seed)
        batch = Batch(torch.randn(6, 4, generator=g, dtype=torch.float64), cams, {"F": labels}, {"F": cents})
        grads = []
        for hook in (None, GradientRouting("reversal", 0.3).hook()):
            model.zero_grad()
            single_composition(model, cond, batch, 0.3, hook=hook).adv.value.backward()
            grads.append(torch.cat([p.grad.reshape(-1) for p in model.backbone.parameters()]))
        reversal_ok &= bool(torch.allclose(grads[1], -0.3 * grads[0], rtol=1e-10, atol=1e-14))
    worst = max(errors.values())
    _report(
        2,
        "gradient suite",
        worst < 1e-3 and zero_cond and reversal_ok,
        f"max rel FD error {worst:.1e}, conditioning grad zero={zero_cond}, reversal=-mu*grad {reversal_ok}",
        time.perf_counter() - start,
        120,
    )


def _split(feats, ids, cams, role, k, distractor=None):
    distractor = np.zeros(len(ids), bool) if distractor is None else distractor
    return DatasetSplit(
        tuple(
            Sample(int(c), i, np.asarray(f), None if d else int(p), distractor=bool(d))
            for i, (f, p, c, d) in enumerate(zip(feats, ids, cams, distractor))
        ),
        role,
        num_cameras=k,
    )


def test_3_retrieval_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    mismatches = 0
    for _ in range(500):
        nq, ng, k = int(rng.integers(1, 8)), int(rng.integers(1, 51)), int(rng.integers(2, 5))
        qf, gf = rng.normal(size=(nq, 6)), rng.normal(size=(ng, 6))
        qi, gi = rng.integers(0, 6, nq), rng.integers(0, 6, ng)
        qc, gc = rng.integers(0, k, nq), rng.integers(0, k, ng)
        gd = rng.random(ng) < 0.15
        got = retrieve_and_score(_split(qf, qi, qc, "query", k), _split(gf, gi, gc, "gallery", k, gd), qf, gf)
        r1, m_ap, excluded = retrieval_brute_force(qf, qi, qc, gf, gi, gc, gd)
        # Rank-1 is a ratio of integers; mAP is compared to the exact rational up to float rounding.
        if got.rank1 != float(r1) or abs(got.mAP - float(m_ap)) > 1e-12 or got.num_excluded != excluded:
            mismatches += 1

    q = np.array([[1.0, 0.0]])
    same_cam = retrieve_and_score(
        _split(q, [1], [0], "query", 2), _split(np.array([[1.0, 0.0], [0.0, 1.0]]), [1, 2], [0, 1], "gallery", 2), q,
        np.array([[1.0, 0.0], [0.0, 1.0]]),
    )
    g = np.array([[1.0, 0.0], [0.9, 0.1]])
    distractor = retrieve_and_score(
        _split(q, [1], [0], "query", 2), _split(g, [1, 1], [1, 1], "gallery", 2, np.array([True, False])), q, g
    )
    crafted = same_cam.num_excluded == 1 and same_cam.num_queries == 0 and distractor.rank1 == 0.0 and distractor.mAP == 0.5
    _report(
        3, "retrieval oracle", mismatches == 0 and crafted, f"{mismatches} mismatches of 500, crafted cases {crafted}",
        time.perf_counter() - start, 60,
    )


def _toy(mode, seed, **overrides):
    cfg = ExperimentConfig.preset(
        "toy", mode=mode, seed=seed, **{"synth.seed": seed, "synth.source_seed": 1000 + seed, **overrides}
    )
    data = load_experiment_data(cfg, ("source_train", "target_train"))
    models = build_models(cfg, data["source_train"])
    for i, m in enumerate(models):
        pretrain_source(m, data["source_train"], cfg, seed=cfg.seed + i)
    return cfg, models, data["target_train"]


def _params(models):
    return torch.cat([p.detach().reshape(-1).clone() for m in models for p in m.parameters()])


def test_4_mu_zero_reduction():
    start = time.perf_counter()
    trajectories = {}
    for mode, mu in (("baseline", 0.0), ("plain_adv", 0.0), ("canu", 0.0)):
        cfg, models, target = _toy(mode, 0, mu=mu, epochs=3)
        snaps = []
        adapt_target(models, target, cfg, on_epoch_end=lambda e, ms: snaps.append(_params(ms)))
        trajectories[mode] = snaps
    identical = all(
        len(trajectories[m]) == 3 and all(torch.equal(a, b) for a, b in zip(trajectories["baseline"], trajectories[m]))
        for m in ("plain_adv", "canu")
    )
    _report(4, "mu=0 reduces to baseline", identical, "bitwise-equal per-epoch parameters", time.perf_counter() - start, 300)


@pytest.fixture(scope="module")
def toy_runs():
    start = time.perf_counter()
    runs = {}
    for seed in range(3):
        for mode in ("baseline", "plain_adv", "canu"):
            cfg, models, target = _toy(mode, seed, **{"synth.correlation": 0.9})
            runs[mode, seed] = adapt_target(models, target, cfg)
    return runs, time.perf_counter() - start


def test_5_negative_transfer_ordering(toy_runs):
    runs, elapsed = toy_runs

    def mean(mode, key):
        return float(np.mean([runs[mode, s].final[key] for s in range(3)]))

    nmi = {m: mean(m, "nmi") for m in ("baseline", "plain_adv", "canu")}
    mi = {m: mean(m, "mutual_information_nats") for m in ("baseline", "plain_adv", "canu")}
    passed = nmi["canu"] >= nmi["plain_adv"] and mi["plain_adv"] < mi["baseline"] and mi["canu"] < mi["baseline"]
    detail = ", ".join(f"{m}: NMI {nmi[m]:.3f} MI {mi[m]:.3f}" for m in nmi)
    _report(5, "negative-transfer ordering (3-seed means)", passed, detail, elapsed, 1200)


@pytest.mark.xfail(strict=True, reason="baseline pseudo-label/camera MI rises during toy adaptation; see the decisions ledger")
def test_mi_decreases_during_training_for_every_mode(toy_runs):
    runs, _ = toy_runs
    for mode in ("baseline", "plain_adv", "canu"):
        initial = np.mean([runs[mode, s].series.column("mutual_information_nats")[0] for s in range(3)])
        final = np.mean([runs[mode, s].final["mutual_information_nats"] for s in range(3)])
        assert final < initial, mode


def test_6_mi_jsd_estimators():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    ok = True
    for _ in range(200):
        n = int(rng.integers(1, 80))
        a, b = rng.integers(0, 5, n), rng.integers(0, 4, n)
        mi = mutual_information(a, b)
        ok &= mi == mutual_information(b, a)
        ok &= mi >= 0
        ok &= abs(mutual_information(a, a) - entropy(a)) <= 1e-9
    for _ in range(100):
        p = rng.dirichlet(np.ones(4))
        q = rng.dirichlet(np.ones(4))
        ok &= jsd_multi([p, p]) <= 1e-9
        ok &= jsd_multi([p, q]) > 0
    ok &= abs(jsd_multi([[1, 0], [0, 1]]) - math.log(2)) <= 1e-9
    _report(6, "MI/JSD estimators", ok, "symmetry, non-negativity, MI(a,a)=H(a), JSD identities", time.perf_counter() - start, 60)


def test_7_permutation_invariance():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    failures = 0
    for _ in range(100):
        k = int(rng.integers(1, 10))
        n = int(rng.integers(k, 60))
        assignments = rng.integers(-1, k, n)
        assignments[:k] = np.arange(k)
        feats = rng.normal(size=(n, 4))
        labeling = PseudoLabeling(assignments, compute_centroids(feats, assignments, k))
        moved = permute(labeling, rng.permutation(k))
        if not np.array_equal(moved.sample_centroids(), labeling.sample_centroids(), equal_nan=True):
            failures += 1
        if not np.array_equal(moved.assignments == OUTLIER, labeling.assignments == OUTLIER):
            failures += 1
    _report(7, "centroid conditioning permutation invariance", failures == 0, f"{failures} failures of 100", time.perf_counter() - start, 60)


def test_8_end_to_end_determinism():
    start = time.perf_counter()
    streams = []
    for _ in range(2):
        cfg, models, target = _toy("canu", 4, epochs=3)
        streams.append([r.scalars() for r in adapt_target(models, target, cfg).reports])
    identical = streams[0] == streams[1] and len(streams[0]) == 3
    _report(8, "end-to-end determinism", identical, "identical epoch-report scalar streams", time.perf_counter() - start, 600)
