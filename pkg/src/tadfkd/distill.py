"""Teacher pretraining and the one-phase generator/student distillation loop."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Graph
from .data import Dataset, EvalView, rng_stream, sample_latent
from .errors import EmptySelection, InvalidSpec
from .metrics import RunRecord, accuracy, diversity_score
from .nn import Network, generator_forward, make_classifier, make_generator, save_network
from .optim import AdamState, SGDState, adam_step, cosine_lr, sgd_step
from .selection import GmmConfig, SelectionMask, per_sample_confidence, select

log = logging.getLogger(__name__)

TELEMETRY_HEADER = ["epoch", "iter", "loss_adv", "loss_rep", "loss_cls", "loss_kd", "selection_rate", "empty_events"]


@dataclass
class TrainConfig:
    alpha: float = 0.0
    beta: float = 1.0
    gamma: float = 10.0
    lam: float = 0.5
    tau: float = 0.5
    selection_enabled: bool = True
    d_z: int = 64
    batch: int = 128
    epochs: int = 50
    iterations_per_epoch: int = 10
    g_steps: int = 1
    s_steps: int = 5
    gen_lr: float = 1e-3
    student_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    student_hidden: tuple = (64, 32)
    generator_hidden: tuple = (128, 128)
    seed: int = 0
    empty_selection_policy: str = "skip_step"
    diversity_samples: int = 1024

    def __post_init__(self):
        self.student_hidden = tuple(self.student_hidden)
        self.generator_hidden = tuple(self.generator_hidden)
        if min(self.gen_lr, self.student_lr) <= 0:
            raise InvalidSpec("learning rates must be positive")
        if self.epochs < 0 or self.iterations_per_epoch < 1:
            raise InvalidSpec("epochs must be >= 0 and iterations_per_epoch >= 1")
        if self.g_steps < 1 or self.s_steps < 1:
            raise InvalidSpec("g_steps and s_steps must be >= 1")
        if self.batch < 2 or self.diversity_samples < 2:
            raise InvalidSpec("batch and diversity_samples must be >= 2")
        if self.empty_selection_policy != "skip_step":
            raise InvalidSpec(f"unsupported empty_selection_policy {self.empty_selection_policy!r}")
        self.weights  # validates ranges

    @property
    def weights(self) -> L.LossWeights:
        return L.LossWeights(self.alpha, self.beta, self.gamma, self.lam)

    @property
    def gmm(self) -> GmmConfig:
        return GmmConfig(tau=self.tau)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["student_hidden"] = list(self.student_hidden)
        d["generator_hidden"] = list(self.generator_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidSpec(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class IterationRecord:
    epoch: int
    iteration: int
    loss_adv: float = float("nan")
    loss_rep: float = float("nan")
    loss_cls: float = float("nan")
    loss_kd: float = float("nan")
    loss_g: float = float("nan")
    selection_rates: list = field(default_factory=list)
    empty_events: int = 0

    @property
    def selection_rate(self) -> float:
        return float(np.mean(self.selection_rates)) if self.selection_rates else float("nan")


@dataclass
class GeneratorStepTrace:
    """Pre-update snapshot handed to an optional observer of each generator step."""

    z: np.ndarray
    generator: Network
    student: Network
    mask: SelectionMask
    loss_g: float
    components: dict


@dataclass
class DistillState:
    generator: Network
    student: Network
    adam: AdamState
    sgd: SGDState
    noise: np.random.Generator
    base_lr: float = 0.01
    student_step: int = 0
    total_student_steps: int = 1

    def sgd_lr(self, t: int) -> float:
        return cosine_lr(self.base_lr, t, self.total_student_steps)


def _mask_for(teacher_logits: np.ndarray, config: TrainConfig) -> SelectionMask:
    if not config.selection_enabled:
        return SelectionMask.all_selected(teacher_logits.shape[0])
    return select(per_sample_confidence(teacher_logits), config.gmm)


def _mean(values):
    return float(np.mean(values)) if values else float("nan")


def generator_step(teacher, state: DistillState, config: TrainConfig, grid=None, trace=None):
    """One generator update; returns (loss values or None when skipped, mask)."""
    gen, student = state.generator, state.student
    z = sample_latent(state.noise, config.batch, config.d_z)
    snapshot = (gen.copy(), student.copy()) if trace is not None else None

    g = Graph()
    gen_params = gen.bind(g)
    x_hat = generator_forward(gen, g.const(z), "train", params=gen_params)
    t_logits, obs = teacher.forward(x_hat, "observe")
    s_logits, _ = student.forward(x_hat, "train")
    mask = _mask_for(t_logits.data, config)
    w = config.weights

    components = {}

    def cls():
        components["cls"] = L.class_prior_loss(t_logits)
        return components["cls"]

    def adv():
        components["adv"] = L.adversarial_loss(t_logits, s_logits, mask)
        return components["adv"]

    def rep():
        components["rep"] = L.representation_loss(obs, teacher, x_hat, grid, w.lam)
        return components["rep"]

    try:
        loss = L.generator_loss(w, cls, adv, rep)
    except EmptySelection:
        return None, mask
    grads = g.backward(loss, gen_params)
    values = {k: float(v.data) for k, v in components.items()}
    if trace is not None:
        trace(GeneratorStepTrace(z, snapshot[0], snapshot[1], mask, float(loss.data), values))
    adam_step(gen.params(), grads, state.adam, config.gen_lr)
    values["g"] = float(loss.data)
    return values, mask


def student_step(teacher, state: DistillState, config: TrainConfig):
    gen, student = state.generator, state.student
    z = sample_latent(state.noise, config.batch, config.d_z)
    x_hat = generator_forward(gen, z, "train").data

    g = Graph()
    x = g.const(x_hat)
    t_logits, _ = teacher.forward(x, "eval")
    s_params = student.bind(g)
    s_logits, _ = student.forward(x, "train", params=s_params)
    mask = _mask_for(t_logits.data, config)
    try:
        loss = L.kd_loss_l1(t_logits, s_logits, mask)
    except EmptySelection:
        state.student_step += 1
        return None, mask
    grads = g.backward(loss, s_params)
    sgd_step(student.params(), grads, state.sgd, config.student_lr, state.student_step, state.total_student_steps)
    state.student_step += 1
    return float(loss.data), mask


def dfkd_iteration(teacher, state: DistillState, config: TrainConfig, epoch=0, iteration=0, grid=None, trace=None):
    """g_steps generator updates followed by s_steps student updates."""
    rec = IterationRecord(epoch, iteration)
    comps, kd = [], []
    for _ in range(config.g_steps):
        values, mask = generator_step(teacher, state, config, grid, trace)
        rec.selection_rates.append(mask.selection_rate)
        if values is None:
            rec.empty_events += 1
        else:
            comps.append(values)
    for _ in range(config.s_steps):
        value, mask = student_step(teacher, state, config)
        rec.selection_rates.append(mask.selection_rate)
        if value is None:
            rec.empty_events += 1
        else:
            kd.append(value)
    rec.loss_adv = _mean([c["adv"] for c in comps if "adv" in c])
    rec.loss_rep = _mean([c["rep"] for c in comps if "rep" in c])
    rec.loss_cls = _mean([c["cls"] for c in comps if "cls" in c])
    rec.loss_g = _mean([c["g"] for c in comps])
    rec.loss_kd = _mean(kd)
    return rec


def init_state(teacher: Network, config: TrainConfig) -> DistillState:
    student = make_classifier(teacher.d_in, config.student_hidden, teacher.d_out, rng_stream(config.seed, "init/student"))
    gen = make_generator(config.d_z, config.generator_hidden, teacher.d_in, rng_stream(config.seed, "init/generator"))
    state = DistillState(
        gen,
        student,
        AdamState(),
        SGDState(config.momentum, config.weight_decay),
        rng_stream(config.seed, "noise/latent"),
        base_lr=config.student_lr,
        total_student_steps=max(1, config.epochs * config.iterations_per_epoch * config.s_steps),
    )
    return state


def _fmt(v) -> str:
    if isinstance(v, float) and np.isnan(v):
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def telemetry_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TELEMETRY_HEADER)
    for r in records:
        w.writerow(
            [r.epoch, r.iteration]
            + [_fmt(v) for v in (r.loss_adv, r.loss_rep, r.loss_cls, r.loss_kd, r.selection_rate)]
            + [r.empty_events]
        )
    return buf.getvalue()


def run_distillation(
    teacher: Network,
    config: TrainConfig,
    eval_view: EvalView,
    out_dir: Optional[Path] = None,
    trace: Optional[Callable[[GeneratorStepTrace], None]] = None,
    labels: Optional[dict] = None,
) -> RunRecord:
    """Distill ``teacher`` into a fresh student; only ``eval_view`` touches real data."""
    state = init_state(teacher, config)
    grid = tuple(eval_view.grid) if eval_view.grid else None
    records: list[IterationRecord] = []
    epochs = []
    initial = accuracy(state.student, eval_view.x, eval_view.y)
    log.info("initial student accuracy %.4f", initial)
    for epoch in range(config.epochs):
        epoch_recs = []
        for it in range(config.iterations_per_epoch):
            epoch_recs.append(dfkd_iteration(teacher, state, config, epoch, it, grid, trace))
        records += epoch_recs
        acc = accuracy(state.student, eval_view.x, eval_view.y)
        rates = [r for rec in epoch_recs for r in rec.selection_rates]
        epochs.append(
            {
                "epoch": epoch,
                "student_accuracy": acc,
                "mean_selection_rate": _mean(rates),
                "lr": state.sgd_lr(state.student_step - 1),
                "empty_events": sum(r.empty_events for r in epoch_recs),
            }
        )
        log.info("epoch %d acc %.4f sel %.3f", epoch, acc, epochs[-1]["mean_selection_rate"])

    div_rng = rng_stream(config.seed, "noise/diversity")
    samples = generator_forward(state.generator, sample_latent(div_rng, config.diversity_samples, config.d_z), "train").data
    spread, entropy = diversity_score(samples, teacher)

    run = RunRecord(
        accuracies=[e["student_accuracy"] for e in epochs],
        initial_accuracy=initial,
        seed=config.seed,
        fingerprint=config.fingerprint(),
        config=config.to_dict(),
        epochs=epochs,
        iterations=records,
        feature_spread=spread,
        class_entropy=entropy,
        labels=dict(labels or {}),
    )
    if out_dir is not None:
        write_run(run, Path(out_dir))
    return run


def write_run(run: RunRecord, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps(
            {"fingerprint": run.fingerprint, "seed": run.seed, "config": run.config, "labels": run.labels},
            sort_keys=True,
            indent=2,
        )
        + "\n"
    )
    (out_dir / "telemetry.csv").write_text(telemetry_csv(run.iterations))
    (out_dir / "summary.json").write_text(json.dumps(run.summary(), sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# teacher pretraining


@dataclass
class TeacherSnapshot:
    network: Network
    epoch: int
    test_accuracy: float
    flagged: bool
    path: Optional[Path] = None


def train_teacher(
    dataset: Dataset,
    epochs: int,
    lr: float = 0.05,
    seed: int = 0,
    snapshot_epochs=(),
    hidden=(128, 128, 64),
    batch: int = 64,
    schedule: str = "cosine",
    momentum: float = 0.9,
    weight_decay: float = 5e-4,
    accuracy_floor: float = 0.0,
    out_dir: Optional[Path] = None,
) -> list[TeacherSnapshot]:
    """Supervised softmax cross-entropy training with snapshots at the given epochs.

    Epoch ``e`` in ``snapshot_epochs`` means "after e epochs", so 0 is the
    untrained network. With no snapshot epochs the final network is returned.
    """
    if schedule not in ("cosine", "constant"):
        raise InvalidSpec(f"unknown schedule {schedule!r}")
    net = make_classifier(dataset.d, hidden, dataset.classes, rng_stream(seed, "init/teacher"))
    order_rng = rng_stream(seed, "data/order")
    x_train, y_train = dataset.train
    x_test, y_test = dataset.test
    n = len(y_train)
    steps_per_epoch = max(1, -(-n // batch))
    total = epochs * steps_per_epoch if schedule == "cosine" else 0
    state = SGDState(momentum, weight_decay)
    wanted = sorted(set(snapshot_epochs)) if snapshot_epochs else [epochs]
    snapshots = []

    def snap(e):
        acc = accuracy(net, x_test, y_test)
        s = TeacherSnapshot(net.copy(), e, acc, acc < accuracy_floor)
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            s.path = Path(out_dir) / f"teacher_e{e:03d}.json"
            save_network(s.network, s.path, meta={"epoch": e, "test_accuracy": acc, "seed": seed})
        snapshots.append(s)
        log.info("teacher snapshot epoch %d acc %.4f", e, acc)

    if 0 in wanted:
        snap(0)
    step = 0
    for e in range(1, epochs + 1):
        perm = order_rng.permutation(n)
        for start in range(0, n, batch):
            idx = perm[start : start + batch]
            if len(idx) < 2:
                continue
            g = Graph()
            params = net.bind(g)
            logits, _ = net.forward(g.const(x_train[idx]), "train", params=params)
            target = L.onehot(y_train[idx], dataset.classes)
            loss = ad.mean(L.cross_entropy(ad.softmax(logits), target))
            grads = g.backward(loss, params)
            sgd_step(net.params(), grads, state, lr, step, total)
            step += 1
        if e in wanted:
            snap(e)
    return snapshots
