import numpy as np
import pytest

from protgo import autodiff as ad
from protgo import ingest
from protgo.checkpoint import load_checkpoint, save_checkpoint
from protgo.model import FreezeMask, ModelConfig, ProteinEncoder
from protgo.training import (
    AdamState, FinetuneConfig, PretrainConfig, TrainingError, adam_step,
    config_from_json, finetune_loss, mask_tokens, mlm_loss, resume_state, train_loop,
)

TINY = ModelConfig(num_layers=1, d_model=8, num_heads=2, d_ff=16, max_len=16,
                   num_labels=3, dropout=0.0)


def _rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


def _finetune_data(n, seed=0, num_labels=3, length=(5, 12)):
    rng = _rng(seed)
    data = []
    for _ in range(n):
        L = int(rng.integers(*length))
        seq = "".join(rng.choice(list("ACDEFGHIKL"), size=L))
        bits = (rng.random(num_labels) < 0.5).astype(np.int8)
        data.append((ingest.tokenize(seq, 16), bits))
    return data


class TestMaskTokens:
    def test_p_near_one_masks_all_residues(self):
        toks = ingest.tokenize("MKVLAE", 16)
        masked, targets = mask_tokens(toks, 0.999999, _rng(0))
        assert masked.ids[0] == ingest.CLS_ID and masked.ids[-1] == ingest.SEP_ID
        assert all(t == ingest.MASK_ID for t in masked.ids[1:-1])
        assert len(targets) == 6
        assert [tid for _, tid in targets] == toks.ids[1:-1]

    def test_binomial_fraction(self):
        toks = ingest.tokenize("A" * 10000, 10000)
        masked, targets = mask_tokens(toks, 0.15, _rng(1))
        frac = len(targets) / 10000
        assert 0.14 <= frac <= 0.16

    def test_forced_single_mask(self):
        toks = ingest.tokenize("MK", 16)
        # small p: keep drawing until chance selects nothing, fallback kicks in
        for seed in range(50):
            masked, targets = mask_tokens(toks, 1e-9, _rng(seed))
            assert len(targets) == 1
            assert masked.ids[targets[0][0]] == ingest.MASK_ID

    def test_original_untouched(self):
        toks = ingest.tokenize("MKVLAE", 16)
        before = list(toks.ids)
        mask_tokens(toks, 0.5, _rng(2))
        assert toks.ids == before


class TestMlmLoss:
    def test_uniform_logits_give_log_vocab(self):
        logits = ad.parameter(np.zeros((1, 5, 30)))
        loss = mlm_loss(logits, [[(1, 7), (3, 9)]])
        assert loss.item() == pytest.approx(np.log(30), abs=1e-9)

    def test_confident_spike_drives_loss_to_zero(self):
        z = np.zeros((1, 4, 30))
        z[0, 2, 11] = 60.0
        loss = mlm_loss(ad.parameter(z), [[(2, 11)]])
        assert loss.item() < 1e-12

    def test_two_targets_hand_mean(self):
        z = np.zeros((1, 4, 30))
        z[0, 1, :3] = [2.0, 1.0, 0.0]
        z[0, 2, :2] = [0.5, -0.5]

        def nll(row, true):
            e = np.exp(row - row.max())
            return -np.log(e[true] / e.sum())

        expected = (nll(z[0, 1], 0) + nll(z[0, 2], 1)) / 2
        loss = mlm_loss(ad.parameter(z), [[(1, 0), (2, 1)]])
        assert loss.item() == pytest.approx(expected, abs=1e-12)

    def test_empty_targets_error(self):
        with pytest.raises(TrainingError):
            mlm_loss(ad.parameter(np.zeros((1, 4, 30))), [[]])


class TestFinetuneLoss:
    def test_perfect_prediction_limit(self):
        y = np.array([[1.0, 0.0]])
        loss = finetune_loss(ad.parameter([[60.0, -60.0]]), y)
        assert loss.item() < 1e-12

    def test_zero_logits_give_log2(self):
        y = np.array([[1.0, 0.0, 1.0]])
        loss = finetune_loss(ad.parameter([[0.0, 0.0, 0.0]]), y)
        assert loss.item() == pytest.approx(np.log(2), abs=1e-12)

    def test_hand_case(self):
        # sigma(z) = [0.9, 0.2], y = [1, 0]
        z = [[np.log(9.0), np.log(0.25)]]
        expected = -(np.log(0.9) + np.log(0.8)) / 2
        loss = finetune_loss(ad.parameter(z), np.array([[1.0, 0.0]]))
        assert loss.item() == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.1643, abs=5e-5)

    def test_shape_mismatch(self):
        with pytest.raises(TrainingError):
            finetune_loss(ad.parameter([[0.0, 0.0]]), np.array([[1.0, 0.0, 1.0]]))

    def test_categorical_switch(self):
        y = np.array([[1.0, 0.0, 0.0]])
        loss = finetune_loss(ad.parameter([[0.0, 0.0, 0.0]]), y, kind="categorical")
        assert loss.item() == pytest.approx(np.log(3), abs=1e-12)


class TestAdam:
    def _single(self, value, grad):
        t = ad.parameter(np.array(value))
        t.grad = np.array(grad)
        params = {"p.w": t}
        return t, params, AdamState(params)

    def test_first_step_magnitude_is_lr(self):
        t, params, state = self._single([1.0, -2.0], [0.3, -0.7])
        adam_step(params, state, lr=0.01)
        update = np.array([1.0, -2.0]) - t.data
        np.testing.assert_allclose(np.abs(update), 0.01, rtol=1e-6)
        assert np.sign(update[0]) == 1.0 and np.sign(update[1]) == -1.0

    def test_zero_gradient_fixed_point(self):
        t, params, state = self._single([1.0, -2.0], [0.0, 0.0])
        adam_step(params, state, lr=0.01)
        np.testing.assert_array_equal(t.data, [1.0, -2.0])

    def test_decoupled_decay_shrinks(self):
        t, params, state = self._single([1.0, -2.0], [0.0, 0.0])
        for _ in range(3):
            adam_step(params, state, lr=0.1, weight_decay=0.5)
        np.testing.assert_allclose(t.data, np.array([1.0, -2.0]) * (1 - 0.1 * 0.5) ** 3, rtol=1e-12)

    def test_non_finite_gradient_names_group(self):
        t, params, state = self._single([1.0], [np.nan])
        with pytest.raises(TrainingError, match="'p'"):
            adam_step(params, state, lr=0.01)

    def test_frozen_params_skipped(self):
        t, params, state = self._single([1.0], [5.0])
        t.requires_grad = False
        adam_step(params, state, lr=0.01)
        np.testing.assert_array_equal(t.data, [1.0])


class TestConfigs:
    def test_mask_probability_bounds(self):
        with pytest.raises(TrainingError, match="mask_probability"):
            PretrainConfig(epochs=1, batch_size=4, mask_probability=1.5)

    def test_unknown_field_rejected(self):
        with pytest.raises(TrainingError, match="unknown config field"):
            config_from_json({"epochs": 1, "batch_size": 4, "typo_field": 3}, "finetune")

    def test_json_roundtrip(self):
        cfg = config_from_json({"epochs": 2, "batch_size": 4, "learning_rate": 1e-3}, "finetune")
        assert isinstance(cfg, FinetuneConfig)
        assert cfg.grad_accumulation == 32


class TestTrainLoop:
    def test_grad_accumulation_equivalence(self):
        data = _finetune_data(64, seed=3)
        runs = {}
        for accum, micro in ((4, 8), (1, 32)):
            model = ProteinEncoder(TINY, seed=9)
            cfg = FinetuneConfig(epochs=2, batch_size=micro, grad_accumulation=accum,
                                 learning_rate=1e-3, seed=5)
            train_loop(model, data, cfg, "finetune")
            runs[accum] = {k: v.data.copy() for k, v in model.params.items()}
        for k in runs[4]:
            np.testing.assert_allclose(runs[4][k], runs[1][k], atol=1e-10)

    def test_same_seed_same_loss_records(self):
        data = _finetune_data(16, seed=1)
        traces = []
        for _ in range(2):
            model = ProteinEncoder(TINY, seed=2)
            cfg = FinetuneConfig(epochs=3, batch_size=4, grad_accumulation=1, seed=7)
            _, recs = train_loop(model, data, cfg, "finetune")
            traces.append([(r.step, r.epoch, r.loss) for r in recs])
        assert traces[0] == traces[1]

    def test_loss_positive_and_steps_increasing(self):
        data = _finetune_data(16, seed=1)
        model = ProteinEncoder(TINY, seed=2)
        cfg = FinetuneConfig(epochs=2, batch_size=4, grad_accumulation=2, seed=7)
        _, recs = train_loop(model, data, cfg, "finetune")
        steps = [r.step for r in recs]
        assert steps == sorted(set(steps))
        assert all(r.loss >= 0 for r in recs)

    def test_frozen_groups_bitwise_constant(self):
        data = _finetune_data(16, seed=4)
        model = ProteinEncoder(TINY, seed=11)
        mask = FreezeMask.default_finetune(TINY)
        before = {k: v.data.copy() for k, v in model.params.items()}
        cfg = FinetuneConfig(epochs=4, batch_size=4, grad_accumulation=1, seed=3)
        train_loop(model, data, cfg, "finetune", freeze_mask=mask)
        from protgo.model import group_of
        changed_frozen = [k for k in before
                          if mask.is_frozen(group_of(k))
                          and not np.array_equal(before[k], model.params[k].data)]
        assert changed_frozen == []
        assert not np.array_equal(before["classifier.w"], model.params["classifier.w"].data)

    def test_monotone_overfit_linearly_separable(self):
        # 8 samples whose labels depend on a single residue's presence
        data = []
        for i, seq in enumerate(["AAAA", "AAAC", "ACAC", "CCCC", "CACA", "AACC", "CCAA", "CAAA"]):
            bits = np.array([1 if "C" in seq else 0, 0, 1], dtype=np.int8)
            data.append((ingest.tokenize(seq, 16), bits))
        model = ProteinEncoder(TINY, seed=1)
        cfg = FinetuneConfig(epochs=30, batch_size=8, grad_accumulation=1,
                             learning_rate=3e-3, seed=0)
        _, recs = train_loop(model, data, cfg, "finetune")
        losses = [r.loss for r in recs]
        tail = losses[3:]
        assert all(tail[i + 1] <= tail[i] + 1e-12 for i in range(len(tail) - 1))
        assert losses[-1] < losses[0]

    def test_pretrain_runs_and_loss_starts_near_log_vocab(self):
        rng = _rng(8)
        seqs = ["".join(rng.choice(list("ACDE"), size=12)) for _ in range(24)]
        data = [ingest.tokenize(s, 16) for s in seqs]
        model = ProteinEncoder(TINY, seed=4)
        cfg = PretrainConfig(epochs=2, batch_size=8, seed=6, learning_rate=1e-3)
        _, recs = train_loop(model, data, cfg, "pretrain")
        assert abs(recs[0].loss - np.log(30)) < 0.05

    def test_resume_reproduces_uninterrupted_trace(self, tmp_path):
        data = _finetune_data(20, seed=5)
        cfg = FinetuneConfig(epochs=4, batch_size=5, grad_accumulation=1, seed=13)

        model_a = ProteinEncoder(TINY, seed=21)
        _, full_trace = train_loop(model_a, data, cfg, "finetune")

        model_b = ProteinEncoder(TINY, seed=21)
        cfg_half = FinetuneConfig(epochs=2, batch_size=5, grad_accumulation=1, seed=13)
        ckpt, first_half = train_loop(model_b, data, cfg_half, "finetune",
                                      checkpoint_path=tmp_path / "half.ckpt")
        save_checkpoint(ckpt, tmp_path / "half.ckpt")

        loaded = load_checkpoint(tmp_path / "half.ckpt")
        model_c = loaded.to_model()
        start_epoch, adam_state = resume_state(loaded, model_c)
        assert start_epoch == 2
        _, second_half = train_loop(model_c, data, cfg, "finetune",
                                    start_epoch=start_epoch, adam_state=adam_state)

        resumed = [(r.step, r.epoch, r.loss) for r in first_half + second_half]
        uninterrupted = [(r.step, r.epoch, r.loss) for r in full_trace]
        assert resumed == uninterrupted
        for k in model_a.params:
            np.testing.assert_array_equal(model_a.params[k].data, model_c.params[k].data)

    def test_non_finite_loss_aborts(self):
        data = _finetune_data(8, seed=2)
        model = ProteinEncoder(TINY, seed=1)
        model.params["classifier.b"].data[:] = np.inf
        cfg = FinetuneConfig(epochs=1, batch_size=4, grad_accumulation=1, seed=0)
        with pytest.raises(TrainingError, match="non-finite loss"):
            train_loop(model, data, cfg, "finetune")

    def test_empty_data_rejected(self):
        model = ProteinEncoder(TINY, seed=1)
        cfg = FinetuneConfig(epochs=1, batch_size=4, seed=0)
        with pytest.raises(TrainingError):
            train_loop(model, [], cfg, "finetune")
