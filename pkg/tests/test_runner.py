import json

import numpy as np
import pytest

from lrcp.buffer import ReplayBuffer
from lrcp.errors import ConfigError, UninitializedModelError
from lrcp.runner import RunConfig, evaluate_all, init_state, run, train_task, build_stream

SMALL = dict(source="synthetic", protocol="ci", n_tasks=3, classes_per_task=2,
             samples_per_class=60, input_dim=16, seed=1)


def small(**kw):
    base = dict(latent_dim=16, lr=1e-2, epochs_per_task=2, stream=dict(SMALL))
    base.update(kw)
    return RunConfig(**base)


def test_defaults_per_mode():
    ci = RunConfig().resolved()
    assert (ci.lambda_push, ci.lambda_preserve, ci.lambda_pull) == (2.0, 0.5, 0.0)
    assert (ci.latent_dim, ci.lr, ci.batch_size, ci.epochs_per_task) == (512, 1e-4, 64, 5)
    assert (ci.tau, ci.tau_push, ci.d_max, ci.epsilon) == (0.07, 7.0, 5, 0.3)
    di = RunConfig(mode="di_supervised").resolved()
    assert (di.lambda_push, di.lambda_preserve, di.lambda_pull) == (0.0, 0.05, 0.1)


@pytest.mark.parametrize("bad", [
    dict(lambda_pull=0.1),
    dict(mode="di_supervised", lambda_push=1.0),
    dict(mode="offline", lambda_preserve=0.5),
    dict(mode="nope"),
    dict(lr=0.0),
    dict(batch_size=1),
    dict(dtype="float16"),
])
def test_config_guards(bad):
    with pytest.raises(ConfigError):
        RunConfig(**bad).resolved()


def test_from_dict_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"latent_dimension": 3})


def test_ci_lambda_pull_rejected_before_training(tmp_path):
    with pytest.raises(ConfigError):
        run(small(lambda_pull=0.1), out=tmp_path / "r.json")
    assert not (tmp_path / "r.json").exists()


def test_first_task_equals_replay_free_training():
    cfg = small().resolved()
    tasks = build_stream(cfg)
    a = train_task(init_state(cfg, 16), tasks[0], cfg)
    zero = small(lambda_push=0.0, lambda_preserve=0.0).resolved()
    b = train_task(init_state(zero, 16), tasks[0], zero)
    assert [r[3] for r in a.loss_log] == [r[3] for r in b.loss_log]
    assert all(set(r[4]) == {"sc"} for r in a.loss_log)
    assert np.array_equal(a.params.weight, b.params.weight)


def test_report_shape_and_growth():
    rep = run(small())
    acc = rep.accuracy
    assert all(acc[i][t] is not None for i in range(3) for t in range(i, 3))
    assert all(acc[i][t] is None for i in range(3) for t in range(i))
    buf = rep.state.buffer
    per_task = [sum(buf.record_count(c.uid) for c in buf.clusters if c.task_index == t) for t in range(3)]
    assert rep.buffer_records == list(np.cumsum(per_task))
    assert all(n % 2 == 0 and n >= 2 * 7 for n in per_task)
    assert all(acc[i][i] >= 0.95 for i in range(3))


def test_offline_single_row():
    rep = run(small(mode="offline"))
    assert len(rep.accuracy) == 1 and len(rep.offline_task_accuracy) == 3


def test_two_task_matrix():
    rep = run(small(stream=dict(SMALL, n_tasks=2)))
    assert len(rep.accuracy) == 2 and rep.bwt is not None


def test_evaluate_empty_buffer():
    cfg = small().resolved()
    state = init_state(cfg, 16)
    with pytest.raises(UninitializedModelError):
        evaluate_all(state, build_stream(cfg)[:1], cfg)


def test_determinism():
    a, b = run(small()), run(small())
    assert a.payload() == b.payload()
    assert np.array_equal(a.state.params.weight, b.state.params.weight)


def test_unsupervised_and_di_modes_run():
    rep = run(small(mode="ci_unsupervised"))
    assert rep.status == "complete" and 0 <= rep.average_accuracy <= 1
    di = dict(SMALL, protocol="di", n_tasks=2, classes_per_task=3)
    rep = run(small(mode="di_supervised", stream=di))
    assert rep.status == "complete"


def test_label_free_training_path(monkeypatch):
    baseline = run(small())
    original = ReplayBuffer.add_task

    def scrambled(self, entries, x, z):
        uids = original(self, entries, x, z)
        keys = sorted(self.eval_class)
        vals = [self.eval_class[k] for k in keys]
        self.eval_class = dict(zip(keys, vals[::-1]))
        return uids

    monkeypatch.setattr(ReplayBuffer, "add_task", scrambled)
    permuted = run(small())
    assert np.array_equal(baseline.state.params.weight, permuted.state.params.weight)
    assert np.array_equal(baseline.state.params.bias, permuted.state.params.bias)


def test_resume_matches_uninterrupted(tmp_path):
    full = run(small())
    part = run(small(), checkpoint_dir=tmp_path, stop_after=1)
    assert part.status == "partial"
    resumed = run(small(), resume_from=tmp_path)
    assert resumed.accuracy == full.accuracy
    assert abs(resumed.bwt - full.bwt) <= 1e-9
    assert np.array_equal(resumed.state.params.weight, full.state.params.weight)


def test_report_written(tmp_path):
    out = tmp_path / "r.json"
    run(small(), out=out, save_buffer=tmp_path / "b.lrcp", latents_dir=tmp_path / "lat")
    data = json.loads(out.read_text())
    assert data["payload"]["status"] == "complete" and len(data["timing"]["task_seconds"]) == 3
    assert (tmp_path / "b.lrcp").exists()
    with np.load(tmp_path / "lat" / "latents_after_task_2.npz") as f:
        assert set(np.unique(f["task"])) == {0, 1, 2}


def test_failure_writes_marker(tmp_path, monkeypatch):
    import lrcp.runner as runner

    real = runner.evaluate_all

    def flaky(state, tasks, cfg):
        if len(tasks) == 2:
            raise UninitializedModelError("simulated")
        return real(state, tasks, cfg)

    monkeypatch.setattr(runner, "evaluate_all", flaky)
    out = tmp_path / "r.json"
    with pytest.raises(UninitializedModelError):
        run(small(), out=out)
    payload = json.loads(out.read_text())["payload"]
    assert payload["status"] == "failed" and "simulated" in payload["error"]
    assert payload["accuracy"][0][0] is not None
