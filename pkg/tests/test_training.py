import math

import numpy as np
import pytest

from mdkd.corpus import BOS, EOS, ParallelCorpus, SentencePair
from mdkd.errors import DivergenceError
from mdkd.model import ModelConfig, forward, init_model
from mdkd.store import build_soft_target_store
from mdkd.training import (
    DataSource,
    TrainConfig,
    _stalled,
    build_batch,
    dev_loss,
    epoch_plan,
    train_epochs,
    train_steps,
)

from conftest import tiny_model

CFG = TrainConfig(batch_size=4, warmup=5, lr_scale=1.0)


def corpus(n=12, seed=0, tag="c") -> ParallelCorpus:
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        toks = tuple(int(x) for x in rng.integers(3, 8, int(rng.integers(1, 4))))
        pairs.append(SentencePair(toks + (EOS,), (BOS,) + toks + (EOS,)))
    return ParallelCorpus(pairs, tag)


def model(seed=0):
    return init_model(ModelConfig(8, 3, 4, seed=seed))


def files(d):
    return sorted(f.name for f in d.iterdir())


class TestEpochPlan:
    def test_covers_every_sentence_once(self):
        plan = epoch_plan([10, 3], 4, seed=1, epoch=0)
        seen = {0: [], 1: []}
        for s, idx in plan:
            assert len(idx) <= 4
            seen[s].extend(idx)
        assert sorted(seen[0]) == list(range(10)) and sorted(seen[1]) == list(range(3))
        assert len(plan) == 3 + 1

    def test_pure_function_of_seed_and_epoch(self):
        assert epoch_plan([9, 5], 2, 3, 1) == epoch_plan([9, 5], 2, 3, 1)
        assert epoch_plan([9, 5], 2, 3, 1) != epoch_plan([9, 5], 2, 3, 2)
        assert epoch_plan([9, 5], 2, 3, 1) != epoch_plan([9, 5], 2, 4, 1)


class TestBatches:
    def test_store_needed_when_lambda_positive(self):
        with pytest.raises(ValueError):
            build_batch(DataSource(corpus(), None, 0.5), [0, 1])

    def test_lambda_zero_ignores_store(self):
        c = corpus()
        batch, lams = build_batch(DataSource(c, None, 0.0), [2, 0])
        assert lams == [0.0, 0.0]
        assert batch.soft is None or all(s is None for s in batch.soft)


class TestStalled:
    @pytest.mark.parametrize("crit,patience,expected", [
        ([3, 2, 1], 1, False),
        ([1, 2], 1, True),
        ([1, 2, 1], 2, True),
        ([2, 1, 1.5], 2, False),
        ([1, 2, 3], None, False),
        ([5], 1, False),
    ])
    def test_cases(self, crit, patience, expected):
        assert _stalled(crit, patience) is expected


class TestTrainSteps:
    def test_loss_goes_down(self):
        c = corpus(24)
        before = dev_loss(model(), c)
        res = train_steps(model(), [DataSource(c)], CFG, 120, seed=0)
        assert dev_loss(res.params, c) < before
        assert res.steps == 120 and len(res.losses) == 120

    def test_deterministic(self):
        c = corpus()
        a = train_steps(model(), [DataSource(c)], CFG, 15, seed=3)
        b = train_steps(model(), [DataSource(c)], CFG, 15, seed=3)
        np.testing.assert_array_equal(a.params.flat, b.params.flat)
        assert a.batch_log == b.batch_log

    def test_seed_changes_batch_order(self):
        c = corpus()
        a = train_steps(model(), [DataSource(c)], CFG, 6, seed=1)
        b = train_steps(model(), [DataSource(c)], CFG, 6, seed=2)
        assert a.batch_log != b.batch_log

    def test_input_params_untouched(self):
        p = model()
        before = p.flat.copy()
        train_steps(p, [DataSource(corpus())], CFG, 3, seed=0)
        np.testing.assert_array_equal(p.flat, before)

    def test_checkpoint_schedule(self):
        res = train_steps(model(), [DataSource(corpus())], CFG, 10, seed=0, checkpoint_every=4)
        assert [s for s, _ in res.checkpoints] == [4, 8, 10]

    def test_resume_is_bit_identical(self, tmp_path):
        srcs = [DataSource(corpus(), name="a"), DataSource(corpus(7, seed=1), name="b")]
        full = train_steps(model(), srcs, CFG, 10, seed=5, checkpoint_every=4)
        train_steps(model(), srcs, CFG, 10, seed=5, checkpoint_every=4, ckpt_dir=tmp_path)
        for stem in ("step_8", "step_10"):  # simulate a crash after step 4
            for suffix in (".ckpt", ".opt.npz", ".json"):
                (tmp_path / f"{stem}{suffix}").unlink()
        resumed = train_steps(model(), srcs, CFG, 10, seed=5, checkpoint_every=4, ckpt_dir=tmp_path)
        np.testing.assert_array_equal(resumed.params.flat, full.params.flat)
        assert resumed.batch_log == full.batch_log
        assert [s for s, _ in resumed.checkpoints] == [4, 8, 10]

    def test_incomplete_checkpoint_is_ignored(self, tmp_path):
        train_steps(model(), [DataSource(corpus())], CFG, 8, seed=0, checkpoint_every=4, ckpt_dir=tmp_path)
        (tmp_path / "step_8.opt.npz").unlink()
        res = train_steps(model(), [DataSource(corpus())], CFG, 8, seed=0, checkpoint_every=4, ckpt_dir=tmp_path)
        full = train_steps(model(), [DataSource(corpus())], CFG, 8, seed=0)
        np.testing.assert_array_equal(res.params.flat, full.params.flat)

    def test_early_stop(self):
        calls = []

        def crit(p):
            calls.append(1)
            return float(len(calls))  # never improves

        res = train_steps(model(), [DataSource(corpus())], CFG, 100, seed=0, checkpoint_every=2,
                          criterion=crit, patience=2)
        assert res.steps == 6 and res.criteria == [1.0, 2.0, 3.0]

    def test_step_offset_shifts_schedule(self):
        c = corpus()
        a = train_steps(model(), [DataSource(c)], CFG, 3, seed=0)
        b = train_steps(model(), [DataSource(c)], TrainConfig(4, 5, 1.0, step_offset=100), 3, seed=0)
        assert np.any(a.params.flat != b.params.flat)
        assert a.batch_log == b.batch_log

    def test_divergence(self):
        p = model()
        p.flat[:] = np.nan
        with pytest.raises(DivergenceError):
            train_steps(p, [DataSource(corpus())], CFG, 2, seed=0)

    def test_empty_data(self):
        with pytest.raises(ValueError):
            train_steps(model(), [DataSource(ParallelCorpus([]))], CFG, 2, seed=0)


class TestTrainEpochs:
    def test_best_is_argmin_later_on_ties(self):
        vals = iter([3.0, 1.0, 2.0, 1.0])
        res = train_epochs(model(), lambda i: [DataSource(corpus())], CFG, 4, 0, criterion=lambda p: next(vals))
        assert res.best == 3
        np.testing.assert_array_equal(res.params.flat, res.checkpoints[3].flat)

    def test_no_criterion_returns_last(self):
        res = train_epochs(model(), lambda i: [DataSource(corpus())], CFG, 2, 0)
        assert res.best == 1 and all(math.isnan(c) for c in res.criteria)

    def test_resume_is_bit_identical(self, tmp_path):
        src = lambda i: [DataSource(corpus(8 + i))]  # noqa: E731
        full = train_epochs(model(), src, CFG, 3, 2, criterion=lambda p: dev_loss(p, corpus()))
        train_epochs(model(), src, CFG, 3, 2, criterion=lambda p: dev_loss(p, corpus()), ckpt_dir=tmp_path)
        for suffix in (".ckpt", ".opt.npz", ".json"):
            (tmp_path / f"epoch_3{suffix}").unlink()
        resumed = train_epochs(model(), src, CFG, 3, 2, criterion=lambda p: dev_loss(p, corpus()),
                               ckpt_dir=tmp_path)
        np.testing.assert_array_equal(resumed.params.flat, full.params.flat)
        assert resumed.criteria == full.criteria
        assert resumed.batch_log == full.batch_log

    def test_distillation_source_pulls_towards_teacher(self):
        c = corpus(16)
        teacher = tiny_model(vocab_size=8, seed=3, scale=1.0)
        store = build_soft_target_store(teacher, c, 8, b"\0" * 8)
        src = [DataSource(c, store, 1.0)]

        def kl(p):
            return sum(float((forward(teacher, q.source, q.target)
                              * (np.log(forward(teacher, q.source, q.target))
                                 - np.log(forward(p, q.source, q.target)))).sum()) for q in c)

        res = train_epochs(model(), lambda i: src, TrainConfig(batch_size=4, warmup=5, lr_scale=2.0,
                                                                 label_smoothing=0.0), 15, 0)
        assert kl(res.params) < 0.5 * kl(model())
