import csv
import io
import json

import numpy as np
import pytest

from tadfkd import losses as L
from tadfkd.autodiff import Graph
from tadfkd.data import make_blobs, make_grid_patterns
from tadfkd.distill import (
    TELEMETRY_HEADER,
    TrainConfig,
    dfkd_iteration,
    init_state,
    run_distillation,
    train_teacher,
)
from tadfkd.errors import InvalidSpec
from tadfkd.nn import dumps_network, generator_forward


def small_config(**kw):
    base = dict(d_z=8, batch=32, epochs=2, iterations_per_epoch=2, s_steps=2, student_hidden=(8,), generator_hidden=(16,))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def grid_data():
    return make_grid_patterns(3, 30, (3, 3), 0.3, 0)


@pytest.fixture(scope="module")
def teacher(grid_data):
    return train_teacher(grid_data, 3, hidden=(16, 8), seed=0)[0].network


class TestTeacherTraining:
    def test_separable_blobs(self):
        ds = make_blobs(2, 100, 4, 0.1, 0)
        (snap,) = train_teacher(ds, 20, hidden=(16, 8), seed=0)
        assert snap.test_accuracy > 0.99

    def test_zero_epochs_is_untrained(self):
        ds = make_blobs(4, 100, 4, 0.3, 0)
        (snap,) = train_teacher(ds, 0, hidden=(16,), seed=0)
        assert snap.epoch == 0
        assert snap.test_accuracy < 0.6

    def test_snapshots_differ_and_are_saved(self, tmp_path, grid_data):
        snaps = train_teacher(grid_data, 2, hidden=(8,), seed=0, snapshot_epochs=[1, 2], out_dir=tmp_path)
        assert [s.epoch for s in snaps] == [1, 2]
        assert snaps[0].network.checksum() != snaps[1].network.checksum()
        assert (tmp_path / "teacher_e001.json").exists() and (tmp_path / "teacher_e002.json").exists()

    def test_low_accuracy_snapshot_is_flagged(self, grid_data):
        (snap,) = train_teacher(grid_data, 0, hidden=(8,), seed=0, accuracy_floor=0.99)
        assert snap.flagged


class TestConfig:
    def test_round_trip_and_fingerprint(self):
        cfg = small_config(seed=3)
        again = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again == cfg and again.fingerprint() == cfg.fingerprint()
        assert small_config(seed=4).fingerprint() != cfg.fingerprint()

    def test_unknown_key(self):
        with pytest.raises(InvalidSpec):
            TrainConfig.from_dict({"alpah": 1.0})

    @pytest.mark.parametrize("kw", [{"gen_lr": 0.0}, {"s_steps": 0}, {"batch": 1}, {"alpha": -1.0}])
    def test_invalid(self, kw):
        with pytest.raises((InvalidSpec, ValueError)):
            small_config(**kw)


class TestIteration:
    def test_student_equal_to_teacher(self, grid_data):
        # no hidden layers: no BN, so train and eval mode agree exactly
        (snap,) = train_teacher(grid_data, 2, hidden=(), seed=0)
        cfg = small_config(student_hidden=(), selection_enabled=False, gamma=0.0)
        state = init_state(snap.network, cfg)
        state.student = snap.network.copy()
        seen = []
        dfkd_iteration(snap.network, state, cfg, trace=seen.append)
        assert seen[0].components["adv"] == pytest.approx(1.0, abs=1e-12)
        z = np.random.default_rng(0).normal(size=(16, cfg.d_z))
        x = generator_forward(state.generator, z).data
        g = Graph()
        t, s = g.const(snap.network.predict(x)), g.const(snap.network.copy().predict(x))
        assert float(L.kd_loss_l1(t, s).data) == 0.0

    def test_teacher_untouched(self, teacher):
        before = dumps_network(teacher)
        cfg = small_config()
        state = init_state(teacher, cfg)
        rec = dfkd_iteration(teacher, state, cfg, grid=(3, 3))
        assert dumps_network(teacher) == before
        assert len(rec.selection_rates) == cfg.g_steps + cfg.s_steps
        assert all(0.0 <= r <= 1.0 for r in rec.selection_rates)

    def test_alpha_zero_has_no_class_prior_value(self, teacher):
        cfg = small_config()
        rec = dfkd_iteration(teacher, init_state(teacher, cfg), cfg)
        assert np.isnan(rec.loss_cls) and np.isfinite(rec.loss_adv) and np.isfinite(rec.loss_kd)

    def test_representation_term_ignores_mask(self, teacher):
        traces = {}
        for enabled in (True, False):
            cfg = small_config(selection_enabled=enabled)
            seen = []
            dfkd_iteration(teacher, init_state(teacher, cfg), cfg, trace=seen.append)
            traces[enabled] = seen[0]
        assert traces[True].components["rep"] == traces[False].components["rep"]
        assert traces[True].mask.selected.sum() < traces[False].mask.selected.sum()

    def test_empty_selection_is_skipped(self, teacher):
        cfg = small_config(tau=1.0)
        state = init_state(teacher, cfg)
        weights_before = {k: v.copy() for k, v in state.generator.params().items()}
        rec = dfkd_iteration(teacher, state, cfg)
        assert rec.empty_events == cfg.g_steps + cfg.s_steps
        for k, v in state.generator.params().items():
            np.testing.assert_array_equal(v, weights_before[k])
        assert state.student_step == cfg.s_steps


class TestRun:
    def test_zero_epochs(self, teacher, grid_data):
        run = run_distillation(teacher, small_config(epochs=0), grid_data.eval_view())
        assert run.accuracies == [] and run.iterations == []
        assert 0.0 <= run.initial_accuracy <= 1.0

    def test_deterministic(self, teacher, grid_data):
        cfg = small_config(seed=5)
        a = run_distillation(teacher, cfg, grid_data.eval_view())
        b = run_distillation(teacher, cfg, grid_data.eval_view())
        assert a.to_json() == b.to_json()
        c = run_distillation(teacher, small_config(seed=6), grid_data.eval_view())
        assert c.to_json() != a.to_json()

    def test_run_directory(self, tmp_path, teacher, grid_data):
        cfg = small_config()
        run = run_distillation(teacher, cfg, grid_data.eval_view(), out_dir=tmp_path, labels={"arm": "x"})
        rows = list(csv.reader(io.StringIO((tmp_path / "telemetry.csv").read_text())))
        assert rows[0] == TELEMETRY_HEADER
        assert len(rows) == 1 + cfg.epochs * cfg.iterations_per_epoch
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert [e["epoch"] for e in summary["epochs"]] == [0, 1]
        assert set(summary["epochs"][0]) >= {"epoch", "student_accuracy", "mean_selection_rate", "lr"}
        assert summary["epochs"][-1]["lr"] < cfg.student_lr
        from tadfkd.metrics import RunRecord

        back = RunRecord.from_dir(tmp_path)
        assert back.accuracies == run.accuracies and back.labels == {"arm": "x"}
