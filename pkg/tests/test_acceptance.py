"""Acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line with the measured
numbers, then asserts.
"""

import time

import numpy as np
import pytest

from lrcp.buffer import ReplayBuffer, build_task_entries, load, persist, select_dimensions, select_support
from lrcp.clustering import kmeans, kmeans_plusplus
from lrcp.losses import (
    CI_SUPERVISED,
    CI_UNSUPERVISED,
    DI_SUPERVISED,
    LossWeights,
    PrototypeStats,
    combined_loss,
    median_bandwidth,
    preserve_loss,
    pseudo_contrastive_loss,
    pull_loss,
    push_loss,
    supcon_loss,
)
from lrcp.metrics import AccuracyMatrix, average_accuracy, bwt
from lrcp.numeric import normalize
from lrcp.runner import RunConfig, run
from oracles import central_diff, lloyd_naive, rel_error, support_naive

CI_STREAM = dict(source="synthetic", protocol="ci", n_tasks=5, classes_per_task=2,
                 samples_per_class=250, test_fraction=0.2, input_dim=32,
                 cluster_separation=8.0, noise_sigma=1.0, seed=0)
DI_STREAM = dict(source="synthetic", protocol="di", n_tasks=4, classes_per_task=5,
                 samples_per_class=250, test_fraction=0.2, input_dim=32,
                 cluster_separation=8.0, noise_sigma=1.0, di_transform="rotation",
                 di_angle_step=30.0, seed=0)


def ci_config(**kw):
    # default hyperparameters with latent_dim and lr scaled to the toy problem
    return RunConfig(mode=kw.pop("mode", CI_SUPERVISED), latent_dim=32, lr=1e-2, seed=0,
                     stream=dict(CI_STREAM), **kw)


def di_config(**kw):
    return RunConfig(mode=DI_SUPERVISED, latent_dim=32, lr=1e-2, seed=0, stream=dict(DI_STREAM), **kw)


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
        return ok
    return emit


def test_criterion_1_gradients(report):
    start = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n, d = int(rng.integers(3, 9)), int(rng.integers(2, 7))
        z = normalize(rng.normal(size=(n, d)))
        labels = rng.integers(0, 2, size=n)
        z_old, z_new = normalize(rng.normal(size=(5, d))), normalize(rng.normal(size=(5, d)))
        gamma = median_bandwidth(z_old, z_new)
        p = PrototypeStats(normalize(rng.normal(size=(3, d))), rng.uniform(0, 1, 3), np.array([0, 1, 0]))
        fixed = pseudo_contrastive_loss(z, 2, seed=seed).labels

        checks = [
            (supcon_loss(z, labels).grad_z, lambda v: supcon_loss(v, labels).value, z),
            (preserve_loss(z_old, z_new, gamma).grad_z, lambda v: preserve_loss(z_old, v, gamma).value, z_new),
            (push_loss(z, p).grad_z, lambda v: push_loss(v, p).value, z),
            (pull_loss(z, labels, p).grad_z, lambda v: pull_loss(v, labels, p).value, z),
            (pseudo_contrastive_loss(z, 2, seed=seed).grad_z, lambda v: supcon_loss(v, fixed).value, z),
        ]
        for mode, w in [(CI_SUPERVISED, LossWeights(push=2.0, preserve=0.5)),
                        (CI_UNSUPERVISED, LossWeights(push=2.0, preserve=0.5)),
                        (DI_SUPERVISED, LossWeights(pull=0.1, preserve=0.05))]:
            kw = dict(labels=labels, protos=p, z_old=z_old, k_pseudo=2, seed=seed, bandwidth=gamma)
            out = combined_loss(mode, z, w, z_new=z_new, **kw)
            if mode == CI_UNSUPERVISED:
                def f(v, w=w):
                    return (supcon_loss(v, fixed).value + w.push * push_loss(v, p).value
                            + w.preserve * preserve_loss(z_old, z_new, gamma).value)
            else:
                def f(v, mode=mode, w=w, kw=kw):
                    return combined_loss(mode, v, w, z_new=z_new, **kw).value
            checks.append((out.grad_z, f, z))
            checks.append((out.grad_z_new,
                           lambda v, mode=mode, w=w, kw=kw: combined_loss(mode, z, w, z_new=v, **kw).value,
                           z_new))
        for analytic, f, at in checks:
            worst = max(worst, rel_error(analytic, central_diff(f, at, h=1e-6)))
    elapsed = time.perf_counter() - start
    ok = report(1, worst < 1e-5 and elapsed < 10, f"max rel err {worst:.2e}, {elapsed:.2f}s")
    assert ok


def test_criterion_2_mmd(report):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    zero = all(preserve_loss(x, x).value == 0.0 for x in (rng.normal(size=(8, 4)) for _ in range(50)))
    nonneg = all(preserve_loss(rng.normal(size=(6, 4)), rng.normal(size=(7, 4))).value >= 0.0
                 for _ in range(200))
    monotone = True
    for _ in range(20):
        x = normalize(rng.normal(size=(8, 4)))
        step = 0.5 * median_bandwidth(x, x)
        for axis in range(4):
            for sign in (1, -1):
                e = np.zeros(4)
                e[axis] = sign * step
                vals = [preserve_loss(x, x + s * e).value for s in range(6)]
                monotone &= all(b > a for a, b in zip(vals, vals[1:]))
    elapsed = time.perf_counter() - start
    ok = report(2, zero and nonneg and monotone and elapsed < 5,
                f"zero={zero} nonneg={nonneg} monotone={monotone}, {elapsed:.2f}s")
    assert ok


def test_criterion_3_clustering_oracle(report):
    matched, monotone = 0, True
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        n, k = int(rng.integers(4, 31)), int(rng.integers(1, 5))
        pts = rng.normal(size=(n, int(rng.integers(1, 4))))
        init = pts[kmeans_plusplus(pts, k, np.random.default_rng(seed))]
        labels, inertia, history = lloyd_naive(pts, init)
        res = kmeans(pts, k, seed=seed)
        matched += np.array_equal(res.assignments, labels) and abs(res.inertia - inertia) < 1e-9
        for h in (res.inertia_history, history):
            monotone &= all(b <= a + 1e-12 * max(a, 1.0) for a, b in zip(h, h[1:]))
    ok = report(3, matched == 50 and monotone, f"{matched}/50 instances match, monotone={monotone}")
    assert ok


def test_criterion_4_buffer_budget(report):
    rng = np.random.default_rng(0)
    counts = {}
    for d_max in (1, 2, 3, 4, 5):
        # isotropic clusters: every latent dimension is selectable
        means = rng.normal(size=(2, 12)) * 10
        z = np.concatenate([m + rng.normal(size=(400, 12)) for m in means])
        e = build_task_entries(z, 2, d_max=d_max, seed=d_max)
        counts[d_max] = sorted({e.record_count(j) for j in range(2)})
    budget_ok = all(counts[d] == [1 + 6 * d] for d in counts) and counts[5] == [31]
    scan_ok = 0
    for seed in range(100):
        r = np.random.default_rng(seed)
        pts = r.normal(size=(int(r.integers(5, 40)), 6)) * r.uniform(0.5, 3, size=6)
        members = np.sort(r.choice(1000, len(pts), replace=False))
        dims = select_dimensions(pts, 5)
        scan_ok += [i for i, _ in select_support(pts, members, dims)] == support_naive(pts, members, dims.selected)
    ok = report(4, budget_ok and scan_ok == 100, f"records per cluster {counts}, support scans {scan_ok}/100")
    assert ok


def test_criterion_5_label_free(report, monkeypatch):
    baseline = run(ci_config())
    original = ReplayBuffer.add_task

    def permuted(self, entries, x, z):
        uids = original(self, entries, x, z)
        # cyclic shift: every cluster gets another cluster's class
        keys = sorted(self.eval_class)
        vals = np.roll([self.eval_class[k] for k in keys], 1)
        self.eval_class = {k: int(v) for k, v in zip(keys, vals)}
        return uids

    monkeypatch.setattr(ReplayBuffer, "add_task", permuted)
    scrambled = run(ci_config())
    same = (np.array_equal(baseline.state.params.weight, scrambled.state.params.weight)
            and np.array_equal(baseline.state.params.bias, scrambled.state.params.bias))
    changed = baseline.state.buffer.eval_class != scrambled.state.buffer.eval_class
    ok = report(5, same and changed, f"weights bitwise identical={same}, side table changed={changed}")
    assert ok


def test_criterion_6_ci_retention(report):
    start = time.perf_counter()
    full = run(ci_config())
    ablated = run(ci_config(lambda_preserve=0.0))
    elapsed = time.perf_counter() - start
    ok = (full.average_accuracy >= 0.90 and full.bwt >= -0.05 and ablated.bwt < full.bwt and elapsed < 60)
    report(6, ok, f"avg {full.average_accuracy:.4f}, bwt {full.bwt:.4f}, "
                  f"ablated bwt {ablated.bwt:.4f}, {elapsed:.1f}s")
    assert ok


def test_criterion_7_di_consistency(report):
    start = time.perf_counter()
    full = run(di_config())
    ablated = run(di_config(lambda_pull=0.0, lambda_preserve=0.0))
    elapsed = time.perf_counter() - start
    ok = full.average_accuracy >= 0.85 and full.bwt > ablated.bwt and elapsed < 60
    report(7, ok, f"avg {full.average_accuracy:.4f}, bwt {full.bwt:.4f}, "
                  f"ablated bwt {ablated.bwt:.4f}, {elapsed:.1f}s")
    assert ok


def test_criterion_8_unsupervised(report):
    unsup = run(ci_config(mode=CI_UNSUPERVISED))
    sup = run(ci_config())
    ok = unsup.average_accuracy >= 0.80 and unsup.average_accuracy <= sup.average_accuracy
    report(8, ok, f"unsupervised {unsup.average_accuracy:.4f}, supervised {sup.average_accuracy:.4f}")
    assert ok


def test_criterion_9_metrics(report):
    acc = AccuracyMatrix.from_rows([[0.9, 0.8], [None, 0.7]])
    b, a = bwt(acc, 1), average_accuracy(acc, 1)
    ok = b == -0.1 and a == 0.75
    report(9, ok, f"bwt {b!r}, average {a!r}")
    assert ok


def test_criterion_10_determinism(report, tmp_path):
    a, b = run(ci_config()), run(ci_config())
    identical = a.payload() == b.payload() and a.to_json().split('"timing"')[0] == b.to_json().split('"timing"')[0]
    persist(a.state.buffer, tmp_path / "b.lrcp")
    round_trip = load(tmp_path / "b.lrcp") == a.state.buffer
    run(ci_config(), checkpoint_dir=tmp_path / "ck", stop_after=2)
    resumed = run(ci_config(), resume_from=tmp_path / "ck")
    drift = max(abs(resumed.average_accuracy - a.average_accuracy), abs(resumed.bwt - a.bwt))
    ok = identical and round_trip and drift <= 1e-9
    report(10, ok, f"reports identical={identical}, round trip exact={round_trip}, resume drift {drift:.1e}")
    assert ok
