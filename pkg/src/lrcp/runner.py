"""Experiment orchestration: config, per-task training, evaluation, reports."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import buffer as buffer_io
from .buffer import ReplayBuffer, build_task_entries
from .errors import ConfigError, LRCPError, UninitializedModelError
from .losses import (
    CI_SUPERVISED,
    CI_UNSUPERVISED,
    DI_SUPERVISED,
    LossWeights,
    PrototypeStats,
    combined_loss,
)
from .metrics import AccuracyMatrix, average_accuracy, bwt, hungarian_mapping, nearest_prototype
from .numeric import (
    AdamState,
    ProjectorParams,
    adam_init,
    adam_step,
    init_projector,
    normalize,
    normalize_backward,
    project,
    projector_grads,
)
from .stream import (
    SyntheticStreamConfig,
    TaskSpec,
    generate_synthetic,
    load_feature_file,
    merge_tasks,
    split_domains,
    split_stream,
)

log = logging.getLogger(__name__)

OFFLINE = "offline"
RUN_MODES = (CI_SUPERVISED, CI_UNSUPERVISED, DI_SUPERVISED, OFFLINE)


@dataclass
class RunConfig:
    mode: str = CI_SUPERVISED
    input_dim: Optional[int] = None  # taken from the stream when unset
    latent_dim: int = 512
    lr: float = 1e-4
    batch_size: int = 64
    epochs_per_task: int = 5
    tau: float = 0.07
    tau_push: float = 7.0
    lambda_push: Optional[float] = None  # 2.0 in CI
    lambda_preserve: Optional[float] = None  # 0.5 in CI, 0.05 in DI
    lambda_pull: Optional[float] = None  # 0.1 in DI
    d_max: int = 5
    epsilon: float = 0.3
    k_pseudo: Optional[int] = None  # defaults to classes per task
    seed: int = 0
    stream: dict = field(default_factory=lambda: {"source": "synthetic"})

    use_bias: bool = True
    dtype: str = "float32"
    sigma_floor: float = 0.1
    pseudo_iters: int = 10
    kmeans_max_iter: int = 300
    kmeans_tol: float = 1e-6
    kmeans_n_init: int = 10
    # "storage": latents frozen when the sample entered the buffer;
    # "task_start": re-snapshotted at the start of every task
    preserve_reference: str = "storage"
    preserve_subsample: Optional[int] = None
    distance: str = "cosine"
    # "current": re-project stored prototype features for evaluation;
    # "snapshot": compare against the frozen prototype latents
    prototype_space: str = "current"

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @property
    def protocol(self):
        if self.mode == DI_SUPERVISED:
            return "di"
        if self.mode == OFFLINE:
            return self.stream.get("protocol", "ci")
        return "ci"

    def resolved(self) -> "RunConfig":
        """Fill mode-dependent defaults and reject inconsistent settings."""
        if self.mode not in RUN_MODES:
            raise ConfigError(f"mode must be one of {RUN_MODES}, got {self.mode!r}")
        cfg = RunConfig(**{f.name: getattr(self, f.name) for f in fields(self)})
        ci = self.mode in (CI_SUPERVISED, CI_UNSUPERVISED)
        di = self.mode == DI_SUPERVISED
        if cfg.lambda_pull and not di:
            raise ConfigError(f"lambda_pull={cfg.lambda_pull} is only valid in {DI_SUPERVISED}")
        if cfg.lambda_push and not ci:
            raise ConfigError(f"lambda_push={cfg.lambda_push} is only valid in CI modes")
        if self.mode == OFFLINE and cfg.lambda_preserve:
            raise ConfigError("offline mode trains without replay terms")
        if cfg.lambda_push is None:
            cfg.lambda_push = 2.0 if ci else 0.0
        if cfg.lambda_pull is None:
            cfg.lambda_pull = 0.1 if di else 0.0
        if cfg.lambda_preserve is None:
            cfg.lambda_preserve = 0.5 if ci else (0.05 if di else 0.0)
        for name in ("lr", "tau", "tau_push", "epsilon"):
            if getattr(cfg, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if min(cfg.lambda_push, cfg.lambda_pull, cfg.lambda_preserve) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if cfg.batch_size < 2 or cfg.epochs_per_task < 1 or cfg.latent_dim < 1:
            raise ConfigError("batch_size >= 2, epochs_per_task >= 1, latent_dim >= 1 required")
        if cfg.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if cfg.preserve_reference not in ("storage", "task_start"):
            raise ConfigError("preserve_reference must be 'storage' or 'task_start'")
        if cfg.prototype_space not in ("current", "snapshot"):
            raise ConfigError("prototype_space must be 'current' or 'snapshot'")
        if cfg.distance not in ("cosine", "euclidean"):
            raise ConfigError("distance must be 'cosine' or 'euclidean'")
        if cfg.k_pseudo is None:
            cfg.k_pseudo = self.stream.get("classes_per_task")
        return cfg

    @property
    def loss_mode(self):
        return CI_SUPERVISED if self.mode == OFFLINE else self.mode

    @property
    def supervised(self):
        return self.mode != CI_UNSUPERVISED

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_push or 0.0, self.lambda_pull or 0.0,
                           self.lambda_preserve or 0.0)


def build_stream(cfg: RunConfig):
    opts = dict(cfg.stream)
    source = opts.pop("source", "synthetic")
    if source == "synthetic":
        opts.setdefault("protocol", cfg.protocol)
        try:
            synth = SyntheticStreamConfig(**opts)
        except TypeError as exc:
            raise ConfigError(f"bad synthetic stream settings: {exc}") from exc
        return generate_synthetic(synth)
    if source == "files":
        missing = {"features", "labels"} - set(opts)
        if missing:
            raise ConfigError(f"file stream needs {sorted(missing)}")
        x, y = load_feature_file(opts["features"], opts["labels"])
        test_fraction = opts.get("test_fraction", 0.2)
        if opts.get("domains"):
            _, dom = load_feature_file(opts["features"], opts["domains"])
            return split_domains(x, y, dom, opts.get("seed", cfg.seed), test_fraction)
        return split_stream(x, y, opts["n_tasks"], opts["classes_per_task"],
                            opts.get("seed", cfg.seed), test_fraction)
    raise ConfigError(f"unknown stream source {source!r}")


@dataclass
class RunState:
    params: ProjectorParams
    adam: AdamState
    buffer: ReplayBuffer
    tasks_done: int = 0
    loss_log: list = field(default_factory=list)


def init_state(cfg: RunConfig, input_dim: int) -> RunState:
    dtype = np.dtype(cfg.dtype)
    rng = np.random.default_rng([cfg.seed, 0])
    params = init_projector(input_dim, cfg.latent_dim, rng, dtype, cfg.use_bias)
    return RunState(params, adam_init(params, cfg.lr),
                    ReplayBuffer(input_dim, cfg.latent_dim, dtype))


def embed(params, x):
    return normalize(project(params, x))


def _replay_inputs(state: RunState, cfg: RunConfig):
    """Everything the replay terms need for one task; read through the label-free view."""
    buf = state.buffer
    if buf.is_empty():
        return None, None, None
    view = buf.replay_view()
    protos = None
    if cfg.mode in (CI_SUPERVISED, CI_UNSUPERVISED) and cfg.lambda_push:
        protos = PrototypeStats(normalize(view.mu), view.sigma, sigma_floor=cfg.sigma_floor)
    elif cfg.mode == DI_SUPERVISED and cfg.lambda_pull:
        first = buf.replay_view(task_indices={0})
        # the pull term is the one sanctioned reader of the evaluation side table
        classes = np.array([buf.eval_class[int(u)] for u in first.cluster_uids])
        protos = PrototypeStats(normalize(first.mu), first.sigma, classes, cfg.sigma_floor)

    features = view.features
    if cfg.preserve_reference == "task_start":
        z_old = embed(state.params, features)
    else:
        z_old = view.latents
    return protos, features, z_old


def train_task(state: RunState, task: TaskSpec, cfg: RunConfig) -> RunState:
    """Train the projector on one task, then add the task's prototypes and supports to the buffer."""
    dtype = np.dtype(cfg.dtype)
    x = np.asarray(task.train_x, dtype=dtype)
    y = np.asarray(task.train_y)
    t = state.tasks_done
    weights = cfg.weights()
    protos, buf_x, z_old = _replay_inputs(state, cfg)
    if buf_x is not None:
        buf_x = buf_x.astype(dtype, copy=False)
    use_preserve = bool(weights.preserve) and buf_x is not None
    k_pseudo = cfg.k_pseudo or len(task.classes)

    params, adam = state.params, state.adam
    n = x.shape[0]
    for epoch in range(cfg.epochs_per_task):
        rng = np.random.default_rng([cfg.seed, 1, t, epoch])
        order = rng.permutation(n)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2 or (not cfg.supervised and len(idx) < k_pseudo):
                continue
            xb = x[idx]
            h = project(params, xb)
            z = normalize(h)

            rx, zo = buf_x, z_old
            if use_preserve and cfg.preserve_subsample and len(buf_x) > cfg.preserve_subsample:
                pick = np.sort(rng.choice(len(buf_x), cfg.preserve_subsample, replace=False))
                rx, zo = buf_x[pick], z_old[pick]
            h_new = project(params, rx) if use_preserve else None

            out = combined_loss(
                cfg.loss_mode, z, weights,
                labels=y[idx] if cfg.supervised else None,
                protos=protos,
                z_old=zo if use_preserve else None,
                z_new=normalize(h_new) if use_preserve else None,
                tau=cfg.tau, tau_push=cfg.tau_push, k_pseudo=k_pseudo,
                seed=[cfg.seed, 2, t, epoch, b], pseudo_iters=cfg.pseudo_iters,
            )
            grads = projector_grads(xb, normalize_backward(h, out.grad_z), cfg.use_bias)
            if out.grad_z_new is not None:
                extra = projector_grads(rx, normalize_backward(h_new, out.grad_z_new), cfg.use_bias)
                grads = ProjectorParams(grads.weight + extra.weight, grads.bias + extra.bias)
            grads = ProjectorParams(grads.weight.astype(dtype), grads.bias.astype(dtype))
            params, adam = adam_step(params, adam, grads)
            state.loss_log.append((t, epoch, b, out.value, dict(out.terms)))

    state.params, state.adam = params, adam
    z_all = embed(params, x)
    entries = build_task_entries(
        z_all, len(task.classes), cfg.d_max, cfg.epsilon, seed=[cfg.seed, 3, t],
        labels=y if cfg.supervised else None, task_index=t,
        kmeans_max_iter=cfg.kmeans_max_iter, kmeans_tol=cfg.kmeans_tol,
        kmeans_n_init=cfg.kmeans_n_init,
    )
    state.buffer.add_task(entries, x, z_all)
    state.tasks_done = t + 1
    return state


def evaluate_all(state: RunState, tasks, cfg: RunConfig) -> list:
    """Accuracy of nearest-prototype classification on each task's test split."""
    buf = state.buffer
    if buf.is_empty():
        raise UninitializedModelError("buffer is empty; train at least one task first")
    uids, proto_x, proto_z, classes = buf.prototype_table()
    if cfg.prototype_space == "current":
        protos = embed(state.params, proto_x)
    else:
        protos = proto_z
    preds = [nearest_prototype(embed(state.params, task.test_x), protos, cfg.distance)
             for task in tasks]
    if cfg.supervised:
        labelled = [classes[p] for p in preds]
    else:
        # unsupervised: match clusters to classes once over everything evaluated
        pooled = np.concatenate([uids[p] for p in preds])
        truth = np.concatenate([task.test_y for task in tasks])
        mapping = hungarian_mapping(pooled, truth)
        labelled = [np.array([mapping.get(int(u), -1) for u in uids[p]]) for p in preds]
    return [float(np.mean(pred == task.test_y)) for pred, task in zip(labelled, tasks)]


@dataclass
class RunReport:
    mode: str
    accuracy: list  # lower-triangular rows, None where undefined
    average_accuracy: Optional[float]
    bwt: Optional[float]
    buffer_records: list  # buffer slot count after each task
    config: dict
    task_seconds: list = field(default_factory=list)
    offline_task_accuracy: Optional[list] = None
    status: str = "complete"
    error: Optional[str] = None

    def payload(self) -> dict:
        """The deterministic part of the report (everything except timings)."""
        out = asdict(self)
        out.pop("task_seconds")
        return out

    def to_json(self) -> str:
        return json.dumps({"payload": self.payload(), "timing": {"task_seconds": self.task_seconds}},
                          indent=2, sort_keys=True)

    def accuracy_records(self):
        """One record per defined (task, after_task) pair."""
        return [
            {"task": i, "after_task": t, "accuracy": v}
            for i, row in enumerate(self.accuracy) for t, v in enumerate(row) if v is not None
        ]

    def write(self, path):
        Path(path).write_text(self.to_json() + "\n")


def _summarize(acc: AccuracyMatrix, done: int):
    if done == 0:
        return None, None
    last = done - 1
    return average_accuracy(acc, last), (bwt(acc, last) if last >= 1 else None)


def save_checkpoint(state: RunState, acc: AccuracyMatrix, directory, extra=None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    buffer_io.persist(state.buffer, d / "buffer.lrcp")
    save_model(state, d / "model.npz")
    progress = {"tasks_done": state.tasks_done, "accuracy": acc.to_rows()}
    progress.update(extra or {})
    (d / "progress.json").write_text(json.dumps(progress))


def save_model(state: RunState, path):
    a = state.adam
    np.savez(path, weight=state.params.weight, bias=state.params.bias,
             m_weight=a.first_moment.weight, m_bias=a.first_moment.bias,
             v_weight=a.second_moment.weight, v_bias=a.second_moment.bias,
             step=np.int64(a.step),
             hyper=np.array([a.lr, a.beta1, a.beta2, a.epsilon]))


def load_model(path):
    with np.load(path) as f:
        params = ProjectorParams(f["weight"], f["bias"])
        lr, b1, b2, eps = (float(v) for v in f["hyper"])
        adam = AdamState(int(f["step"]), ProjectorParams(f["m_weight"], f["m_bias"]),
                         ProjectorParams(f["v_weight"], f["v_bias"]), lr, b1, b2, eps)
    return params, adam


def load_checkpoint(directory, n_tasks):
    d = Path(directory)
    params, adam = load_model(d / "model.npz")
    buf = buffer_io.load(d / "buffer.lrcp")
    progress = json.loads((d / "progress.json").read_text())
    acc = AccuracyMatrix(n_tasks)
    for i, row in enumerate(progress["accuracy"]):
        for t, v in enumerate(row):
            if v is not None:
                acc[i, t] = v
    state = RunState(params, adam, buf, progress["tasks_done"])
    return state, acc, progress


def export_latents(state: RunState, tasks, path):
    """Dump current latents of every given task's test split (for external t-SNE)."""
    z = [embed(state.params, t.test_x) for t in tasks]
    np.savez(path, latents=np.concatenate(z),
             labels=np.concatenate([t.test_y for t in tasks]),
             task=np.concatenate([np.full(len(t.test_y), t.task_index) for t in tasks]))


def run(config: RunConfig, *, out=None, save_buffer=None, latents_dir=None,
        checkpoint_dir=None, resume_from=None, stop_after=None) -> RunReport:
    """Train and evaluate sequentially over the configured stream.

    ``stop_after`` ends the run early after that many tasks (useful with
    ``checkpoint_dir`` to split a run and later ``resume_from`` it).
    """
    cfg = config.resolved()
    tasks = build_stream(cfg)
    if cfg.input_dim is None:
        cfg.input_dim = int(tasks[0].train_x.shape[1])
    if cfg.k_pseudo is None:
        cfg.k_pseudo = len(tasks[0].classes)
    offline_tasks = None
    if cfg.mode == OFFLINE:
        offline_tasks = tasks
        tasks = [merge_tasks(tasks)]

    n_tasks = len(tasks)
    if resume_from is not None:
        state, acc, progress = load_checkpoint(resume_from, n_tasks)
        seconds = list(progress.get("task_seconds", []))
        records = list(progress.get("buffer_records", []))
    else:
        state = init_state(cfg, cfg.input_dim)
        acc = AccuracyMatrix(n_tasks)
        seconds, records = [], []

    report = RunReport(cfg.mode, acc.to_rows(), None, None, records, asdict(cfg), seconds)
    try:
        end = n_tasks if stop_after is None else min(n_tasks, stop_after)
        for t in range(state.tasks_done, end):
            started = time.perf_counter()
            train_task(state, tasks[t], cfg)
            column = evaluate_all(state, tasks[: t + 1], cfg)
            for i, a in enumerate(column):
                acc[i, t] = a
            seconds.append(time.perf_counter() - started)
            records.append(state.buffer.n_records)
            log.info("task %d: acc=%s buffer=%d", t, np.round(column, 4).tolist(), records[-1])
            if latents_dir is not None:
                Path(latents_dir).mkdir(parents=True, exist_ok=True)
                seen = offline_tasks if offline_tasks is not None else tasks[: t + 1]
                export_latents(state, seen, Path(latents_dir) / f"latents_after_task_{t}.npz")
            if checkpoint_dir is not None:
                save_checkpoint(state, acc, checkpoint_dir,
                                {"task_seconds": seconds, "buffer_records": records})
        report.accuracy = acc.to_rows()
        report.average_accuracy, report.bwt = _summarize(acc, state.tasks_done)
        if offline_tasks is not None:
            report.offline_task_accuracy = evaluate_all(state, offline_tasks, cfg)
        if state.tasks_done < n_tasks:
            report.status = "partial"
    except LRCPError as exc:
        report.accuracy = acc.to_rows()
        report.status = "failed"
        report.error = f"{type(exc).__name__}: {exc}"
        if out is not None:
            report.write(out)
        raise
    if save_buffer is not None:
        buffer_io.persist(state.buffer, save_buffer)
    if out is not None:
        report.write(out)
    report.state = state
    return report
