import numpy as np
import pytest

from driftadapt.adapters import ScalePair, attach_adapters
from driftadapt.datasets import DomainSpec, generate_stream
from driftadapt.gating import GateConfig
from driftadapt.layers import LinearLayer, MlpModel
from driftadapt.optim import Adam
from driftadapt.trainer import (
    AugmentConfig,
    TeacherStudent,
    adapt_step,
    augment,
    ema_update,
    pseudo_label,
    run_stream,
)


def rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


def toy_pair(seed=0, alpha=0.99, low_rank=1, high_rank=8):
    g = rng(seed)
    source = MlpModel.init(4, (8,), 3, g)
    return TeacherStudent.from_source(source, low_rank, high_rank, g, alpha=alpha), source


class TestAugment:
    def test_zero_sigma_identity(self):
        x = rng(0).normal(size=(5, 4))
        out = augment(x, AugmentConfig(sigma=0.0), rng(1))
        np.testing.assert_array_equal(out, x)

    def test_single_unit_factor_identity(self):
        x = rng(0).normal(size=(5, 4))
        out = augment(x, AugmentConfig(kind="feature_scale", factors=(1.0,)), rng(1))
        np.testing.assert_array_equal(out, x)

    def test_jitter_reproducible(self):
        x = rng(0).normal(size=(5, 4))
        cfg = AugmentConfig(sigma=0.1)
        np.testing.assert_array_equal(augment(x, cfg, rng(3)), augment(x, cfg, rng(3)))

    def test_feature_scale_scales_rows(self):
        x = np.ones((400, 2))
        cfg = AugmentConfig(kind="feature_scale", factors=(0.5, 2.0))
        out = augment(x, cfg, rng(4))
        assert set(np.round(np.unique(out), 6)) == {0.5, 2.0}
        assert np.all(out[:, 0] == out[:, 1])

    def test_bad_config(self):
        with pytest.raises(ValueError):
            AugmentConfig(kind="other")
        with pytest.raises(ValueError):
            AugmentConfig(sigma=-0.1)
        with pytest.raises(ValueError):
            AugmentConfig(kind="feature_scale", factors=())


class TestPseudoLabel:
    def test_zero_model_uniform(self):
        zero = MlpModel([LinearLayer(np.zeros((3, 4)), np.zeros(3))])
        adapted = attach_adapters(zero, 1, 8, rng(0))
        probs = pseudo_label(adapted, rng(1).normal(size=(5, 4)), ScalePair(1.0, 1.0))
        np.testing.assert_allclose(probs, np.full((5, 3), 1 / 3))

    def test_rows_sum_to_one(self):
        ts, _ = toy_pair()
        probs = pseudo_label(ts.teacher, rng(1).normal(size=(7, 4)), ScalePair(1.0, 1.0))
        np.testing.assert_allclose(probs.sum(axis=1), np.ones(7), atol=1e-9)

    def test_matches_source_argmax_at_init(self):
        ts, source = toy_pair(seed=3)
        x = rng(4).normal(size=(20, 4))
        probs = pseudo_label(ts.teacher, x, ScalePair(1.0, 1.0))
        np.testing.assert_array_equal(probs.argmax(axis=1), source.predict_proba(x).argmax(axis=1))


class TestEma:
    def test_fixed_point_when_equal(self):
        ts, _ = toy_pair()
        before = [p.copy() for p in ts.teacher.adapter_parameters()]
        ema_update(ts)
        for p, b in zip(ts.teacher.adapter_parameters(), before):
            np.testing.assert_array_equal(p, b)

    def test_closed_form_geometric(self):
        # teacher starts at 0, student held at 1: after t updates teacher = 1 - alpha^t
        ts, _ = toy_pair(alpha=0.999)
        for p in ts.teacher.adapter_parameters():
            p[:] = 0.0
        for p in ts.student.adapter_parameters():
            p[:] = 1.0
        for t in [1, 10, 100]:
            ts_local, _ = toy_pair(alpha=0.999)
            for p in ts_local.teacher.adapter_parameters():
                p[:] = 0.0
            for p in ts_local.student.adapter_parameters():
                p[:] = 1.0
            for _ in range(t):
                ema_update(ts_local)
            expected = 1.0 - 0.999**t
            for p in ts_local.teacher.adapter_parameters():
                np.testing.assert_allclose(p, expected, atol=1e-9)

    def test_single_step_value(self):
        ts, _ = toy_pair(alpha=0.999)
        for p in ts.teacher.adapter_parameters():
            p[:] = 0.0
        for p in ts.student.adapter_parameters():
            p[:] = 1.0
        ema_update(ts)
        for p in ts.teacher.adapter_parameters():
            np.testing.assert_allclose(p, 0.001, atol=1e-15)

    def test_alpha_zero_copies_student(self):
        ts, _ = toy_pair(alpha=0.0)
        for p in ts.student.adapter_parameters():
            p[:] = 7.0
        ema_update(ts)
        for p in ts.teacher.adapter_parameters():
            np.testing.assert_array_equal(p, np.full_like(p, 7.0))

    def test_structure_mismatch_raises(self):
        ts, source = toy_pair()
        other = TeacherStudent.from_source(source, 2, 8, rng(5))
        with pytest.raises(RuntimeError):
            TeacherStudent(teacher=ts.teacher, student=other.student)


class TestAdaptStep:
    def setup_method(self):
        self.gate = GateConfig(dropout_rate=0.1)
        self.aug = AugmentConfig(sigma=0.05)

    def test_loss_finite_and_nonnegative(self):
        ts, _ = toy_pair()
        opt = Adam(ts.student.adapter_parameters())
        out = adapt_step(ts, rng(1).normal(size=(6, 4)), self.gate, opt, self.aug, rng(2))
        assert np.isfinite(out.loss)
        assert out.loss >= 0.0

    def test_empty_batch_raises(self):
        ts, _ = toy_pair()
        opt = Adam(ts.student.adapter_parameters())
        with pytest.raises(ValueError):
            adapt_step(ts, np.zeros((0, 4)), self.gate, opt, self.aug, rng(2))

    def test_base_parameters_bit_identical_after_steps(self):
        ts, source = toy_pair(seed=6)
        source_params = [p.copy() for p in source.parameters()]
        opt = Adam(ts.student.adapter_parameters(), lr=0.05)
        g = rng(3)
        for _ in range(10):
            adapt_step(ts, g.normal(size=(8, 4)), self.gate, opt, self.aug, g)
        for model in (ts.teacher, ts.student):
            for p, s in zip(model.base_parameters(), source_params):
                np.testing.assert_array_equal(p, s)

    def test_zero_scales_accumulate_no_adapter_motion(self):
        ts, _ = toy_pair(seed=7)
        gate = GateConfig(mode="fixed", fixed_high=0.0, fixed_low=0.0)
        opt = Adam(ts.student.adapter_parameters(), lr=0.05)
        before = [p.copy() for p in ts.student.adapter_parameters()]
        out = adapt_step(ts, rng(1).normal(size=(6, 4)), gate, opt, self.aug, rng(2))
        assert out.loss >= 0.0
        for p, b in zip(ts.student.adapter_parameters(), before):
            np.testing.assert_array_equal(p, b)

    def test_deterministic_loss_sequence(self):
        losses = []
        for _ in range(2):
            ts, _ = toy_pair(seed=8)
            opt = Adam(ts.student.adapter_parameters())
            g = rng(9)
            run = [
                adapt_step(ts, g.normal(size=(6, 4)), self.gate, opt, self.aug, g).loss
                for _ in range(5)
            ]
            losses.append(run)
        assert losses[0] == losses[1]

    def test_step_counter_and_ema_move(self):
        ts, _ = toy_pair(seed=10, alpha=0.9)
        opt = Adam(ts.student.adapter_parameters(), lr=0.05)
        adapt_step(ts, rng(1).normal(size=(6, 4)), self.gate, opt, self.aug, rng(2))
        assert ts.step == 1
        diffs = [
            np.abs(t - s).max()
            for t, s in zip(ts.teacher.adapter_parameters(), ts.student.adapter_parameters())
        ]
        assert max(diffs) > 0.0  # teacher lags the student after one update


class TestRunStream:
    def make_stream(self, **kw):
        args = dict(
            class_count=3,
            dim=4,
            n_domains=2,
            batches_per_domain=5,
            batch_size=8,
            source_size=64,
            seed=0,
        )
        args.update(kw)
        return generate_stream(**args)

    def test_report_shape_and_mean(self):
        stream = self.make_stream()
        g = rng(0)
        source = MlpModel.init(4, (8,), 3, g)
        ts = TeacherStudent.from_source(source, 1, 8, g)
        opt = Adam(ts.student.adapter_parameters())
        res = run_stream(ts, stream, GateConfig(), opt, AugmentConfig(), rng(1))
        assert len(res.domains) == 2
        assert res.mean_error == pytest.approx(np.mean(res.per_domain_errors))
        assert ts.step == 10  # one adaptation per batch, each batch visited once

    def test_noop_adaptation_equals_frozen(self):
        stream = self.make_stream(seed=3)
        g = rng(2)
        source = MlpModel.init(4, (8,), 3, g)
        ts = TeacherStudent.from_source(source, 1, 8, g)
        gate = GateConfig(mode="fixed", fixed_high=0.0, fixed_low=0.0)
        opt = Adam(ts.student.adapter_parameters(), lr=0.0)
        res = run_stream(ts, stream, gate, opt, AugmentConfig(sigma=0.0), rng(4))
        for dom in res.domains:
            x = stream.domains[dom.domain_index].all_x
            y = stream.domains[dom.domain_index].all_labels
            frozen_err = float((source.predict_proba(x).argmax(1) != y).mean())
            assert dom.error == pytest.approx(frozen_err, abs=1e-12)

    def test_same_seed_identical_reports(self):
        outs = []
        for _ in range(2):
            stream = self.make_stream(seed=5)
            g = rng(6)
            source = MlpModel.init(4, (8,), 3, g)
            ts = TeacherStudent.from_source(source, 1, 8, g)
            opt = Adam(ts.student.adapter_parameters())
            res = run_stream(ts, stream, GateConfig(), opt, AugmentConfig(), rng(7))
            outs.append([(d.error, d.teacher_error, d.mean_loss) for d in res.domains])
        assert outs[0] == outs[1]

    def test_empty_stream_rejected(self):
        stream = self.make_stream()
        stream.domains.clear()
        g = rng(0)
        source = MlpModel.init(4, (8,), 3, g)
        ts = TeacherStudent.from_source(source, 1, 8, g)
        with pytest.raises(ValueError):
            run_stream(ts, stream, GateConfig(), Adam(ts.student.adapter_parameters()), AugmentConfig(), rng(1))
