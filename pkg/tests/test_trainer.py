import numpy as np
import pytest

import oracles
from tagl.gated import TaglConfig
from tagl.gridmap import GridShape, Image, ValidationError
from tagl.losses import SegLossSpec
from tagl.phantom import PhantomConfig, generate_dataset, sample_case
from tagl.trainer import (
    ABLATION_CONFIGS,
    FEAT_BIAS,
    FEAT_CONTRA,
    FEAT_INTENSITY,
    LinearHead,
    Optimizer,
    TrainConfig,
    TrainingDiverged,
    ablation_train_config,
    batch_objective,
    evaluate_cases,
    extract_features,
    fit,
    forward,
    predict_probs,
    train_step,
    validation_scores,
)
from tagl.gradcheck import toy_case

SMALL = GridShape(32, 32)


def small_dataset(seed=0, n=(6, 3, 3), **kw):
    return generate_dataset(PhantomConfig(shape=SMALL, seed=seed, **kw), *n)


class TestFeatures:
    def test_uniform_image_zero_contralateral(self):
        case = sample_case(PhantomConfig(shape=SMALL, seed=1), 0)
        img = Image(SMALL, np.full(SMALL.as_tuple(), 0.4))
        f = extract_features(img, case.bg.atlas)
        assert (f[FEAT_CONTRA] == 0.0).all()
        assert (f[FEAT_INTENSITY] == 0.0).all()  # z-score of a constant

    def test_bias_channel_is_one(self):
        case = sample_case(PhantomConfig(shape=SMALL, seed=1), 0)
        f = extract_features(case.bg.image, case.bg.atlas)
        assert (f[FEAT_BIAS] == 1.0).all()

    def test_onehot_zero_outside_masks(self):
        case = sample_case(PhantomConfig(shape=SMALL, seed=1), 0)
        atlas = case.bg.atlas
        f = extract_features(case.bg.image, atlas)
        covered = np.zeros(SMALL.as_tuple(), dtype=bool)
        for tid in atlas.territory_ids():
            covered |= atlas.mask(tid).values.astype(bool)
        onehots = f[2:12]  # local index k holds territory id k+1
        assert (onehots[:, ~covered] == 0.0).all()
        # SG territories (ids 8..10) are all zero on a BG slice
        assert (onehots[7:] == 0.0).all()

    def test_contralateral_antisymmetric_under_flip(self):
        case = sample_case(PhantomConfig(shape=SMALL, seed=2), 0)
        f = extract_features(case.bg.image, case.bg.atlas)
        flipped_img = Image(SMALL, np.flip(case.bg.image.values, axis=1))
        g = extract_features(flipped_img, case.bg.atlas)
        # flipping the image negates the channel pointwise
        assert np.allclose(g[FEAT_CONTRA], -f[FEAT_CONTRA], atol=1e-12)


class TestForward:
    def test_zero_weights_uniform(self):
        case = sample_case(PhantomConfig(shape=SMALL, seed=3), 0)
        f = extract_features(case.bg.image, case.bg.atlas)
        logits = forward(LinearHead.zeros(), f)
        assert (logits.values == 0.0).all()
        pbg, _ = predict_probs(LinearHead.zeros(), case)
        assert np.allclose(pbg.values, 1.0 / 11.0)

    def test_linearity(self):
        rng = np.random.default_rng(4)
        case = sample_case(PhantomConfig(shape=SMALL, seed=4), 0)
        f = extract_features(case.bg.image, case.bg.atlas)
        head = LinearHead(rng.normal(size=(13, 11)))
        double = LinearHead(2.0 * head.weights)
        assert np.allclose(forward(double, f).values, 2.0 * forward(head, f).values)

    def test_one_pixel_dot_products(self):
        # hand instance embedded in the 13-feature layout: intensity and bias
        f = np.zeros((13, 1, 1))
        f[FEAT_INTENSITY] = 0.7
        f[FEAT_BIAS] = 1.0
        w = np.zeros((13, 11))
        w[FEAT_INTENSITY, 2] = 2.0  # logit_2 = 1.4
        w[FEAT_BIAS, 1] = 1.0  # logit_1 = 1.0
        logits = forward(LinearHead(w), f)
        assert logits.values[2, 0, 0] == pytest.approx(1.4)
        assert logits.values[1, 0, 0] == pytest.approx(1.0)
        assert np.argmax(logits.values[:, 0, 0]) == 2

    def test_channel_count_checked(self):
        with pytest.raises(ValidationError):
            forward(LinearHead.zeros(), np.zeros((12, 2, 2)))


class TestTrainStep:
    def test_lambda_zero_is_bitwise_ce(self):
        ds = small_dataset(seed=5)
        batch = list(ds.train[:4])
        cfg_a = TrainConfig(seed=5, tagl=TaglConfig(lam=0.0))
        cfg_b = ablation_train_config("ce", 5)
        h1, p1 = train_step(LinearHead.zeros(), batch, cfg_a, Optimizer(cfg_a))
        h2, p2 = train_step(LinearHead.zeros(), batch, cfg_b, Optimizer(cfg_b))
        assert np.array_equal(h1.weights, h2.weights)
        assert p1 == p2

    def test_zero_learning_rate_keeps_head(self):
        ds = small_dataset(seed=6)
        cfg = TrainConfig(seed=6, learning_rate=0.0)
        head = LinearHead(np.random.default_rng(0).normal(size=(13, 11)))
        new, _ = train_step(head, list(ds.train[:2]), cfg, Optimizer(cfg))
        assert np.array_equal(new.weights, head.weights)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_names_case(self):
        ds = small_dataset(seed=7)
        cfg = TrainConfig(seed=7)
        head = LinearHead(np.full((13, 11), 1e308))
        with pytest.raises(TrainingDiverged) as err:
            train_step(head, list(ds.train[:2]), cfg, Optimizer(cfg))
        assert "c0000" in str(err.value)

    @pytest.mark.parametrize("name", ["ce", "ce_tagl", "ce_tagl_fixedq"])
    def test_end_to_end_gradient(self, name):
        rng = np.random.default_rng(8)
        cfg = ablation_train_config(name, 0)
        checked = 0
        while checked < 3:
            case = toy_case(rng, 8)
            head = LinearHead(rng.normal(0, 0.5, size=(13, 11)))
            total, _, _, grad_w, _, _ = batch_objective(head, [case], cfg)

            def loss_of(w):
                return batch_objective(LinearHead(w), [case], cfg)[0]

            num = oracles.central_diff(loss_of, head.weights, eps=1e-4)
            if not np.isfinite(num).all():
                continue
            assert oracles.rel_err(grad_w, num) < 1e-4
            checked += 1

    def test_ce_dice_gradient(self):
        rng = np.random.default_rng(9)
        cfg = TrainConfig(
            seg_loss=SegLossSpec("CE_DICE", bce_dice_mix=0.5), tagl=TaglConfig(lam=1.0)
        )
        case = toy_case(rng, 8)
        head = LinearHead(rng.normal(0, 0.5, size=(13, 11)))
        _, _, _, grad_w, _, _ = batch_objective(head, [case], cfg)
        num = oracles.central_diff(
            lambda w: batch_objective(LinearHead(w), [case], cfg)[0], head.weights, eps=1e-4
        )
        assert oracles.rel_err(grad_w, num) < 1e-4

    def test_cd_scale_gradient(self):
        rng = np.random.default_rng(10)
        cfg = ablation_train_config("ce_tagl_tunecd", 0)
        assert cfg.learn_cd_scale
        case = toy_case(rng, 8)
        head = LinearHead(rng.normal(0, 0.5, size=(13, 11)), cd_scale=1.3)
        _, _, _, _, grad_a, _ = batch_objective(head, [case], cfg)
        eps = 1e-6

        def at(a):
            return batch_objective(LinearHead(head.weights, a), [case], cfg)[0]

        num = (at(1.3 + eps) - at(1.3 - eps)) / (2 * eps)
        assert grad_a == pytest.approx(num, rel=1e-4)

    def test_detach_bg_changes_gradient(self):
        rng = np.random.default_rng(11)
        case = toy_case(rng, 8)
        head = LinearHead(rng.normal(0, 0.5, size=(13, 11)))
        cfg_full = TrainConfig(tagl=TaglConfig(lam=1.0))
        cfg_detach = TrainConfig(tagl=TaglConfig(lam=1.0), detach_bg=True)
        _, _, _, g_full, _, _ = batch_objective(head, [case], cfg_full)
        _, _, _, g_detach, _, _ = batch_objective(head, [case], cfg_detach)
        assert not np.array_equal(g_full, g_detach)

    def test_sgd_optimizer(self):
        ds = small_dataset(seed=12)
        cfg = TrainConfig(seed=12, optimizer="SGD", learning_rate=0.5)
        head = LinearHead.zeros()
        total, _, _, grad_w, _, _ = batch_objective(head, list(ds.train[:2]), cfg)
        new, _ = train_step(head, list(ds.train[:2]), cfg, Optimizer(cfg))
        assert np.allclose(new.weights, -0.5 * grad_w)


class TestFit:
    def test_single_epoch_best_and_history(self):
        ds = small_dataset(seed=13)
        best, hist = fit(TrainConfig(epochs=1, seed=13), ds)
        assert best.epoch == 1
        assert len(hist) == 1

    def test_history_length_matches_epochs(self):
        ds = small_dataset(seed=14)
        _, hist = fit(TrainConfig(epochs=4, seed=14), ds)
        assert [h.epoch for h in hist] == [1, 2, 3, 4]

    def test_best_maximizes_val_dice(self):
        ds = small_dataset(seed=15)
        best, hist = fit(TrainConfig(epochs=5, seed=15), ds)
        assert best.val_mean_dice == max(h.val_soft_dice for h in hist)

    def test_deterministic_bit_for_bit(self):
        ds = small_dataset(seed=16)
        cfg = TrainConfig(epochs=3, seed=16, tagl=TaglConfig(lam=1.0))
        best1, hist1 = fit(cfg, ds)
        best2, hist2 = fit(cfg, ds)
        assert np.array_equal(best1.head.weights, best2.head.weights)
        assert hist1 == hist2

    def test_history_finite_across_ablation_matrix(self):
        ds = small_dataset(seed=17)
        for name in ABLATION_CONFIGS:
            cfg = ablation_train_config(name, 17)
            cfg = type(cfg)(**{**cfg.__dict__, "epochs": 2})
            _, hist = fit(cfg, ds)
            for h in hist:
                assert np.isfinite([h.train_total, h.train_seg, h.train_tagl]).all()
                assert np.isfinite([h.val_soft_dice, h.val_consistency]).all()

    def test_empty_split_rejected(self):
        ds = small_dataset(seed=18, n=(4, 0, 2))
        with pytest.raises(ValidationError):
            fit(TrainConfig(epochs=1, seed=18), ds)

    def test_overlapping_splits_rejected(self):
        ds = small_dataset(seed=19)
        bad = type(ds)(config=ds.config, train=ds.train, val=ds.train[:1], test=ds.test)
        with pytest.raises(ValidationError):
            fit(TrainConfig(epochs=1, seed=19), bad)

    def test_easy_regime_reaches_high_dice(self):
        # contrast far above noise: CE-only must exceed 0.9 validation soft
        # Dice within 50 epochs (crosses around epoch 11 at this scale)
        cfg_p = PhantomConfig(
            shape=GridShape(48, 48), hypodensity_delta=0.3, noise_sigma=0.01,
            lesion_rate=0.5, seed=21,
        )
        ds = generate_dataset(cfg_p, 200, 50, 0)
        best, hist = fit(TrainConfig(epochs=16, seed=21, tagl=TaglConfig(lam=0.0)), ds)
        assert best.val_mean_dice > 0.9
        assert min(h.epoch for h in hist if h.val_soft_dice > 0.9) <= 50


class TestEvaluate:
    def test_summary_means_match_cases(self):
        ds = small_dataset(seed=20)
        best, _ = fit(TrainConfig(epochs=2, seed=20), ds)
        per_case, summary = evaluate_cases(best.head, ds.test, 0.05)
        assert summary.n_cases == len(ds.test)
        assert summary.mean_dice == pytest.approx(
            np.mean([c.report.mean_dice for c in per_case])
        )
        assert summary.aspects_mae == pytest.approx(
            np.mean([c.score_abs_err for c in per_case])
        )

    def test_empty_case_list_rejected(self):
        with pytest.raises(ValidationError):
            evaluate_cases(LinearHead.zeros(), [], 0.05)

    def test_validation_scores_range(self):
        ds = small_dataset(seed=22)
        dice, cons = validation_scores(LinearHead.zeros(), ds.val, 0.05)
        assert 0.0 <= dice <= 1.0 and 0.0 <= cons <= 1.0
