import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clshead.errors import DivergedError, ValidationError
from clshead.features import FeatureSet, synth_features
from clshead.heads import (
    BASELINE,
    PROPOSED,
    Head,
    HeadSpec,
    TrainConfig,
    build_baseline_head,
    build_proposed_head,
    count_params,
    default_train_config,
    evaluate,
    head_forward,
    head_loss_and_grads,
    train_head,
)
from clshead.layers import AffineParams, init_uniform, make_rng
from clshead.optim import EarlyStopConfig, SgdConfig

from oracles import rel_err


def tiny_proposed(feature_dim=6, n_classes=3, seed=0) -> Head:
    rng = make_rng(seed)
    cls = init_uniform(feature_dim, 1000, rng)
    return build_proposed_head(cls, n_classes, rng)


def tiny_baseline(feature_dim=6, n_classes=3, seed=0, hidden=None) -> Head:
    rng = make_rng(seed)
    pen = init_uniform(feature_dim, hidden, rng) if hidden else None
    return build_baseline_head(pen, feature_dim, n_classes, rng)


def separable_set(n_classes=3, per_class=40, dim=16, seed=0, name="train"):
    return synth_features(n_classes, per_class, dim, separation=10.0, seed=seed, name=name)


class TestBuilders:
    def test_proposed_vgg19_param_count(self):
        head = tiny_proposed(feature_dim=4096, n_classes=5)
        assert head.spec.layer_dims == ((4096, 1000), (1000, 5))
        assert count_params(head) == 4096 * 1000 + 1000 + 1000 * 5 + 5 == 4_102_005

    def test_proposed_resnet18_param_count(self):
        head = tiny_proposed(feature_dim=512, n_classes=3)
        assert count_params(head) == 513_000 + 3_003 == 516_003

    def test_proposed_rejects_wrong_classifier_width(self):
        rng = make_rng(0)
        with pytest.raises(ValidationError):
            build_proposed_head(init_uniform(64, 999, rng), 3, rng)

    def test_proposed_rejects_zero_classes(self):
        rng = make_rng(0)
        with pytest.raises(ValidationError):
            build_proposed_head(init_uniform(64, 1000, rng), 0, rng)

    def test_baseline_vgg19_param_count(self):
        head = tiny_baseline(feature_dim=4096, n_classes=5, hidden=4096)
        assert count_params(head) == 4096 * 4096 + 4096 + 4096 * 5 + 5 == 16_801_797

    def test_baseline_resnet18_param_count(self):
        head = tiny_baseline(feature_dim=512, n_classes=5)
        assert count_params(head) == 512 * 5 + 5 == 2_565

    def test_trainable_param_ratio_is_about_4x(self):
        baseline = count_params(tiny_baseline(4096, 5, hidden=4096))
        proposed = count_params(tiny_proposed(4096, 5))
        assert 4.0 < baseline / proposed < 4.2

    def test_baseline_rejects_mismatched_penultimate(self):
        rng = make_rng(0)
        pen = init_uniform(128, 128, rng)
        with pytest.raises(ValidationError):
            build_baseline_head(pen, 64, 3, rng)

    def test_headspec_requires_chained_dims(self):
        with pytest.raises(ValidationError):
            HeadSpec(
                kind=BASELINE,
                layer_dims=((4, 8), (9, 3)),
                layer_init=("pretrained", "uniform"),
                activation_after=(True, False),
            )

    def test_headspec_proposed_needs_1000_wide_input(self):
        with pytest.raises(ValidationError):
            HeadSpec(
                kind=PROPOSED,
                layer_dims=((4, 999), (999, 3)),
                layer_init=("pretrained", "uniform"),
                activation_after=(False, True),
            )

    def test_builders_do_not_share_pretrained_buffers(self):
        rng = make_rng(3)
        cls = init_uniform(8, 1000, rng)
        head = build_proposed_head(cls, 3, rng)
        head.layers[0].weight += 1.0
        assert not np.array_equal(head.layers[0].weight, cls.weight)


def fd_check_head(head: Head, x, labels, n_params=20, h=1e-3, tol=1e-3, seed=0):
    """Finite differences through the 32-bit loss at random parameters."""
    loss_of = lambda: head_loss_and_grads(head, x, labels)
    loss_of()  # populate analytic grads
    grads = [(p.grad_weight.copy(), p.grad_bias.copy()) for p in head.layers]
    rng = make_rng(seed)
    analytic, numeric = [], []
    for _ in range(n_params):
        li = int(rng.integers(0, len(head.layers)))
        p = head.layers[li]
        use_bias = rng.random() < 0.2
        arr = p.bias if use_bias else p.weight
        g = grads[li][1] if use_bias else grads[li][0]
        idx = tuple(rng.integers(0, s) for s in arr.shape)
        orig = arr[idx]
        arr[idx] = orig + h
        up = loss_of()
        arr[idx] = orig - h
        down = loss_of()
        arr[idx] = orig
        numeric.append((up - down) / (2 * h))
        analytic.append(float(g[idx]))
    assert rel_err(np.array(analytic), np.array(numeric)) < tol


def _kink_safe_instance(head: Head, batch, seed):
    """Random batch whose pre-ReLU activations stay away from the kinks."""
    rng = make_rng(seed)
    for _ in range(50):
        x = rng.standard_normal((batch, head.input_dim)).astype(np.float32)
        labels = rng.integers(0, head.n_classes, batch)
        safe = True
        out = x
        for p, act in zip(head.layers, head.spec.activation_after):
            out = out @ p.weight + p.bias
            if act and np.abs(out).min() < 0.05:
                safe = False
                break
            if act:
                out = np.maximum(out, 0)
        if safe:
            return x, labels
    raise AssertionError("could not find a kink-safe instance")


class TestEndToEndGradients:
    def test_proposed_head_matches_fd(self):
        head = tiny_proposed(feature_dim=6, n_classes=3, seed=1)
        x, labels = _kink_safe_instance(head, batch=4, seed=2)
        fd_check_head(head, x, labels)

    def test_baseline_two_layer_matches_fd(self):
        head = tiny_baseline(feature_dim=6, n_classes=3, seed=1, hidden=8)
        x, labels = _kink_safe_instance(head, batch=4, seed=3)
        fd_check_head(head, x, labels)

    def test_baseline_single_layer_matches_fd(self):
        head = tiny_baseline(feature_dim=6, n_classes=3, seed=1)
        x, labels = _kink_safe_instance(head, batch=4, seed=4)
        fd_check_head(head, x, labels)


class TestTraining:
    def test_separable_set_fits_both_kinds(self):
        # enough images that the momentum recipe's 1e-3 steps converge too
        train = separable_set(per_class=200)
        val = synth_features(3, 10, 16, separation=10.0, seed=1, name="val")
        for head in (tiny_proposed(16, 3), tiny_baseline(16, 3, hidden=16)):
            kind = head.spec.kind
            cfg = default_train_config(kind, seed=0)
            train_head(head, train, val, cfg)
            assert evaluate(head, train) >= 99.0, kind

    def test_one_epoch_strictly_decreases_loss(self):
        train = separable_set(seed=5)
        val = synth_features(3, 10, 16, separation=10.0, seed=6, name="val")
        for kind, head in ((PROPOSED, tiny_proposed(16, 3)), (BASELINE, tiny_baseline(16, 3, hidden=16))):
            cfg = default_train_config(kind, seed=0, max_epochs=2, early_stop=None)
            result = train_head(head, train, val, cfg)
            assert result.loss_curve[1] < result.loss_curve[0], kind

    def test_deterministic_for_fixed_seed(self):
        train = separable_set(seed=7)
        val = synth_features(3, 10, 16, separation=10.0, seed=8, name="val")
        results = []
        for _ in range(2):
            head = tiny_proposed(16, 3, seed=9)
            cfg = default_train_config(PROPOSED, seed=11)
            r = train_head(head, train, val, cfg)
            r.test_accuracy_pct = evaluate(head, train)
            results.append(r)
        a, b = results
        assert a.loss_curve == b.loss_curve
        assert a.val_loss_curve == b.val_loss_curve
        assert a.lr_curve == b.lr_curve
        assert a.epochs_run == b.epochs_run
        assert a.best_epoch == b.best_epoch
        assert a.test_accuracy_pct == b.test_accuracy_pct

    def test_lr_trace_follows_step_decay(self):
        train = separable_set(per_class=8)
        val = synth_features(3, 4, 16, separation=10.0, seed=2, name="val")
        head = tiny_proposed(16, 3)
        cfg = default_train_config(PROPOSED, seed=0, max_epochs=25, early_stop=None)
        result = train_head(head, train, val, cfg)
        assert result.lr_curve[:7] == [1e-2] * 7
        assert all(lr == pytest.approx(1e-3, rel=1e-12) for lr in result.lr_curve[7:14])
        assert result.lr_curve == [1e-2 * 0.1 ** (e // 7) for e in range(25)]

    def test_curves_have_epochs_run_length(self):
        train = separable_set(per_class=20, seed=3)
        val = synth_features(3, 10, 16, separation=10.0, seed=4, name="val")
        head = tiny_proposed(16, 3)
        result = train_head(head, train, val, default_train_config(PROPOSED, seed=0))
        assert result.epochs_run <= 25
        assert len(result.loss_curve) == result.epochs_run
        assert len(result.val_loss_curve) == result.epochs_run
        assert len(result.lr_curve) == result.epochs_run

    def test_never_mutates_inputs(self):
        train = separable_set(per_class=10, seed=12)
        val = synth_features(3, 5, 16, separation=10.0, seed=13, name="val")
        before = train.data.tobytes(), train.labels.tobytes(), val.data.tobytes()
        head = tiny_baseline(16, 3, hidden=16)
        train_head(head, train, val, default_train_config(BASELINE, seed=0, max_epochs=2))
        assert (train.data.tobytes(), train.labels.tobytes(), val.data.tobytes()) == before

    def test_empty_train_rejected(self):
        empty = FeatureSet("e", np.zeros((0, 1, 16), np.float32), np.zeros(0, int), ["a", "b", "c"])
        val = synth_features(3, 5, 16, separation=1.0, seed=0)
        with pytest.raises(ValidationError):
            train_head(tiny_proposed(16, 3), empty, val, default_train_config(PROPOSED))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_epoch(self):
        train = separable_set(per_class=10, seed=14)
        val = synth_features(3, 5, 16, separation=10.0, seed=15, name="val")
        head = tiny_proposed(16, 3)
        cfg = TrainConfig(sgd=SgdConfig(base_lr=1e12), seed=0, max_epochs=5)
        with pytest.raises(DivergedError) as exc:
            train_head(head, train, val, cfg)
        assert exc.value.epoch >= 0

    def test_dead_output_warning(self, caplog):
        train = separable_set(per_class=10, seed=16)
        val = synth_features(3, 5, 16, separation=10.0, seed=17, name="val")
        head = tiny_proposed(16, 3)
        head.layers[-1].bias[:] = -1000.0  # clamp every output at the ReLU
        with caplog.at_level(logging.WARNING, logger="clshead.heads"):
            train_head(head, train, val, default_train_config(PROPOSED, seed=0, max_epochs=1))
        assert any("dead" in rec.message for rec in caplog.records)

    def test_variant_cycling_uses_epoch_mod_v(self):
        # two variants, second one carries a constant class-revealing signal
        rng = make_rng(20)
        base = synth_features(3, 12, 8, separation=0.0, seed=21)
        data = np.repeat(base.data, 2, axis=1).copy()
        train = FeatureSet("t", data, base.labels, base.class_names)
        val = synth_features(3, 6, 8, separation=0.0, seed=22, name="val")
        head = tiny_baseline(8, 3)
        cfg = default_train_config(BASELINE, seed=0, max_epochs=2, early_stop=None)
        r = train_head(head, train, val, cfg)
        assert r.epochs_run == 2  # sanity: both variants visited without error


class TestEvaluate:
    def one_hot_features(self, flip=False):
        labels = np.array([0, 1, 0, 1])
        data = np.zeros((4, 1, 2), np.float32)
        data[np.arange(4), 0, labels] = 10.0
        fs = FeatureSet("t", data, labels, ["a", "b"])
        w = np.eye(2, dtype=np.float32)
        if flip:
            w = w[:, ::-1].copy()
        head = Head(
            HeadSpec(BASELINE, ((2, 2),), ("uniform",), (False,)),
            [AffineParams(w, np.zeros(2))],
        )
        return head, fs

    def test_one_hot_head_scores_100(self):
        head, fs = self.one_hot_features()
        assert evaluate(head, fs) == 100.0

    def test_flipped_predictions_score_0(self):
        head, fs = self.one_hot_features(flip=True)
        assert evaluate(head, fs) == 0.0

    def test_random_head_near_chance_on_balanced_5_classes(self):
        fs = synth_features(5, 200, 32, separation=0.0, seed=30)
        head = tiny_baseline(32, 5, seed=31)
        assert 14.0 <= evaluate(head, fs) <= 26.0

    def test_empty_set_rejected(self):
        head = tiny_baseline(8, 3)
        empty = FeatureSet("e", np.zeros((0, 1, 8), np.float32), np.zeros(0, int), ["a", "b", "c"])
        with pytest.raises(ValidationError):
            evaluate(head, empty)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=10)
    def test_permutation_invariant(self, seed):
        fs = synth_features(3, 20, 8, separation=2.0, seed=40)
        head = tiny_baseline(8, 3, seed=41)
        perm = make_rng(seed).permutation(fs.n_images)
        shuffled = FeatureSet(fs.name, fs.data[perm], fs.labels[perm], fs.class_names)
        assert evaluate(head, fs) == evaluate(head, shuffled)

    @given(st.floats(0.01, 100.0))
    @settings(max_examples=15)
    def test_proposed_argmax_invariant_to_positive_scaling(self, scale):
        fs = synth_features(3, 30, 8, separation=1.0, seed=50)
        head = tiny_proposed(8, 3, seed=51)
        base_pred = head_forward(head, fs.data[:, 0, :]).argmax(axis=1)
        head.layers[-1].weight *= np.float32(scale)
        head.layers[-1].bias *= np.float32(scale)
        scaled_pred = head_forward(head, fs.data[:, 0, :]).argmax(axis=1)
        assert np.array_equal(base_pred, scaled_pred)


def test_default_configs_match_recipes():
    p = default_train_config(PROPOSED)
    b = default_train_config(BASELINE)
    assert p.sgd.base_lr == 1e-2 and p.sgd.momentum == 0.0
    assert b.sgd.base_lr == 1e-3 and b.sgd.momentum == 0.9
    for cfg in (p, b):
        assert cfg.sgd.step_size == 7 and cfg.sgd.gamma == 0.1
        assert cfg.max_epochs == 25 and cfg.sgd.weight_decay == 0.0
        assert cfg.early_stop == EarlyStopConfig(patience=3, min_delta=1e-4)
