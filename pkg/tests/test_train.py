import json
import time

import numpy as np
import pytest

from labelforge.dataio import Dataset, GaussianSpec, generate_gaussian
from labelforge.labelreg import CMatrix
from labelforge.model import Mlp, init_model
from labelforge.train import (
    TrainConfig,
    distill,
    evaluate,
    gradient_check,
    train,
    train_ablation,
    write_metrics_csv,
    write_run_artifacts,
)
from labelforge.analysis import c_row_entropy

PAIRED_MEANS = np.array([[0.0, 0.0], [1.0, 0.0], [10.0, 10.0], [11.0, 10.0]])


@pytest.fixture(scope="module")
def small_task():
    train_set = generate_gaussian(GaussianSpec(PAIRED_MEANS, 0.5, 40, seed=301))
    test_set = generate_gaussian(GaussianSpec(PAIRED_MEANS, 0.5, 20, seed=302))
    return train_set, test_set


def zero_model(sizes):
    weights = [np.zeros((a, b)) for a, b in zip(sizes, sizes[1:])]
    biases = [np.zeros(b) for b in sizes[1:]]
    return Mlp(sizes, weights, biases)


def metrics_bytes(tmp_path, result, name):
    path = tmp_path / name
    write_metrics_csv(result.report, path)
    return path.read_bytes()


class TestTrainConfig:
    def test_alpha_range(self):
        with pytest.raises(ValueError, match="alpha"):
            TrainConfig(alpha=1.5)
        with pytest.raises(ValueError, match="alpha"):
            TrainConfig(alpha=-0.1)

    def test_unknown_strategy(self):
        with pytest.raises(ValueError, match="strategy"):
            TrainConfig(strategy="mystery")

    def test_unknown_ablation_loss(self):
        with pytest.raises(ValueError, match="ablation_loss"):
            TrainConfig(ablation_loss="fancy")

    def test_positive_requirements(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=-1)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(lr=0.0)

    def test_resolved_materializes_defaults(self):
        cfg = TrainConfig().resolved(input_dim=2, num_classes=4)
        assert cfg.layer_sizes == (2, 32, 4)
        assert cfg.c_lr == cfg.lr
        assert cfg.alpha == 0.1

    def test_resolved_rejects_mismatched_sizes(self):
        with pytest.raises(ValueError, match="layer_sizes"):
            TrainConfig(layer_sizes=(3, 8, 4)).resolved(input_dim=2, num_classes=4)


class TestEvaluate:
    def test_uniform_predictor_closed_form(self):
        model = zero_model([2, 4])
        data = Dataset(np.random.default_rng(0).normal(size=(8, 2)), [0, 1, 2, 3] * 2, 4)
        out = evaluate(model, data)
        # argmax ties break to the lowest index, so only class 0 is "hit"
        assert out["accuracy"] == pytest.approx(0.25)
        assert out["mean_nll"] == pytest.approx(np.log(4.0), abs=1e-12)
        assert out["mean_max_prob"] == pytest.approx(0.25, abs=1e-12)

    def test_near_perfect_predictor(self):
        # huge logit gap saturates the softmax to a one-hot output
        model = zero_model([4, 4])
        model.weights[0] = np.eye(4) * 100.0
        data = Dataset(np.eye(4), [0, 1, 2, 3], 4)
        out = evaluate(model, data)
        assert out["accuracy"] == 1.0
        assert out["mean_nll"] == 0.0

    def test_accuracy_matches_recount_oracle(self, small_task):
        train_set, _ = small_task
        model = init_model([2, 8, 4], seed=1)
        out = evaluate(model, train_set)
        probs = model.forward(train_set.features).probs
        hits = sum(
            1
            for i in range(len(train_set))
            if int(np.argmax(probs[i])) == int(train_set.labels[i])
        )
        assert out["accuracy"] == hits / len(train_set)

    def test_class_count_mismatch(self, small_task):
        train_set, _ = small_task
        with pytest.raises(ValueError):
            evaluate(init_model([2, 8, 3], seed=0), train_set)


class TestTrainBasics:
    def test_zero_epochs_is_noop(self, small_task):
        train_set, test_set = small_task
        cfg = TrainConfig(epochs=0, seed=3, layer_sizes=(2, 8, 4))
        out = train(cfg, train_set, test_set)
        fresh = init_model([2, 8, 4], seed=3)
        for a, b in zip(out.model.weights, fresh.weights):
            assert np.array_equal(a, b)
        assert out.report.epoch_stats == []

    def test_progresses_on_easy_task(self, small_task):
        train_set, test_set = small_task
        out = train(TrainConfig(epochs=40, seed=1, layer_sizes=(2, 16, 4)), train_set, test_set)
        assert out.report.final_test_accuracy > 0.6
        assert out.report.wall_time_sec > 0.0

    def test_ls_alpha_zero_equals_onehot_bitwise(self, small_task, tmp_path):
        train_set, test_set = small_task
        a = train(TrainConfig(strategy="ls", alpha=0.0, epochs=8, seed=7,
                              layer_sizes=(2, 8, 4)), train_set, test_set)
        b = train(TrainConfig(strategy="onehot", alpha=0.0, epochs=8, seed=7,
                              layer_sizes=(2, 8, 4)), train_set, test_set)
        assert metrics_bytes(tmp_path, a, "a.csv") == metrics_bytes(tmp_path, b, "b.csv")
        for wa, wb in zip(a.model.weights, b.model.weights):
            assert np.array_equal(wa, wb)

    def test_lspp_frozen_table_equals_ls_bitwise(self, small_task, tmp_path):
        train_set, test_set = small_task
        a = train(TrainConfig(strategy="lspp", c_lr=0.0, epochs=8, seed=7,
                              layer_sizes=(2, 8, 4)), train_set, test_set)
        b = train(TrainConfig(strategy="ls", epochs=8, seed=7,
                              layer_sizes=(2, 8, 4)), train_set, test_set)
        assert metrics_bytes(tmp_path, a, "a.csv") == metrics_bytes(tmp_path, b, "b.csv")
        assert np.array_equal(a.cmatrix.logits, np.zeros((4, 3)))

    def test_deterministic_repeat(self, small_task, tmp_path):
        train_set, test_set = small_task
        cfg = TrainConfig(strategy="lspp", epochs=10, seed=9, layer_sizes=(2, 8, 4))
        a = train(cfg, train_set, test_set)
        b = train(cfg, train_set, test_set)
        assert metrics_bytes(tmp_path, a, "a.csv") == metrics_bytes(tmp_path, b, "b.csv")
        assert np.array_equal(a.cmatrix.logits, b.cmatrix.logits)

    def test_lspp_diagonal_stays_zero_and_target_mass_fixed(self, small_task):
        train_set, test_set = small_task
        out = train(TrainConfig(strategy="lspp", epochs=15, seed=2,
                                layer_sizes=(2, 8, 4)), train_set, test_set)
        expanded = out.cmatrix.expanded_probs()
        assert np.array_equal(np.diag(expanded), np.zeros(4))
        from labelforge.labelreg import target_table

        table = target_table(out.cmatrix)
        assert np.array_equal(np.diag(table), np.full(4, 1.0 - 0.1))

    def test_teacher_required_for_distill_modes(self, small_task):
        train_set, test_set = small_task
        with pytest.raises(ValueError, match="teacher"):
            train(TrainConfig(strategy="distill"), train_set, test_set)
        with pytest.raises(ValueError, match="teacher"):
            train(TrainConfig(strategy="proxy_distill"), train_set, test_set)

    def test_teacher_class_count_mismatch(self, small_task):
        train_set, test_set = small_task
        bad_teacher = init_model([2, 8, 3], seed=0)
        with pytest.raises(ValueError, match="outputs"):
            distill(TrainConfig(layer_sizes=(2, 8, 4)), bad_teacher, train_set, test_set)


class TestOlsStrategy:
    def test_runs_and_reports(self, small_task):
        train_set, test_set = small_task
        out = train(TrainConfig(strategy="ols", epochs=40, seed=4,
                                layer_sizes=(2, 8, 4)), train_set, test_set)
        assert out.cmatrix is None
        assert out.report.final_test_accuracy > 0.5
        assert out.report.ols_fallbacks == 0

    def test_correct_only_accumulation_may_fall_back(self, small_task):
        train_set, test_set = small_task
        out = train(
            TrainConfig(strategy="ols", epochs=3, seed=4, ols_correct_only=True,
                        layer_sizes=(2, 8, 4)),
            train_set,
            test_set,
        )
        assert out.report.ols_fallbacks >= 0  # counted, usually 0 on this task


class TestAblation:
    def test_sce_ours_is_bit_identical_to_lspp(self, small_task, tmp_path):
        train_set, test_set = small_task
        a = train(TrainConfig(strategy="lspp", epochs=10, seed=5,
                              layer_sizes=(2, 8, 4)), train_set, test_set)
        b = train_ablation(
            TrainConfig(strategy="ablation", ablation_loss="sce_ours", epochs=10,
                        seed=5, layer_sizes=(2, 8, 4)),
            train_set,
            test_set,
        )
        assert metrics_bytes(tmp_path, a, "a.csv") == metrics_bytes(tmp_path, b, "b.csv")
        assert np.array_equal(a.cmatrix.logits, b.cmatrix.logits)

    def test_gated_rows_have_lower_entropy_collapse_than_split(self, small_task):
        # boosted table rate so the collapse fully plays out at this scale
        train_set, test_set = small_task
        base = dict(epochs=200, seed=6, layer_sizes=(2, 16, 4), c_lr=0.5)
        ours = train_ablation(TrainConfig(ablation_loss="sce_ours", **base),
                              train_set, test_set)
        orig = train_ablation(TrainConfig(ablation_loss="sce_original", **base),
                              train_set, test_set)
        assert c_row_entropy(ours.cmatrix).mean() > c_row_entropy(orig.cmatrix).mean()

    def test_ce_variant_learns_low_entropy_rows(self, small_task):
        train_set, test_set = small_task
        base = dict(epochs=200, seed=6, layer_sizes=(2, 16, 4), c_lr=0.5)
        ours = train_ablation(TrainConfig(ablation_loss="sce_ours", **base),
                              train_set, test_set)
        ce = train_ablation(TrainConfig(ablation_loss="ce", **base),
                            train_set, test_set)
        assert c_row_entropy(ce.cmatrix).mean() < c_row_entropy(ours.cmatrix).mean()

    def test_strategy_forced_to_ablation(self, small_task):
        train_set, test_set = small_task
        out = train_ablation(TrainConfig(epochs=1, seed=0, layer_sizes=(2, 8, 4)),
                             train_set, test_set)
        assert out.cmatrix is not None


class TestDistill:
    def test_proxy_never_calls_teacher_forward(self, small_task):
        train_set, test_set = small_task
        teacher = train(TrainConfig(strategy="lspp", epochs=10, seed=1,
                                    layer_sizes=(2, 8, 4)), train_set, test_set)
        out = distill(TrainConfig(epochs=10, seed=2, layer_sizes=(2, 8, 4)),
                      teacher.cmatrix, train_set, test_set)
        assert out.report.teacher_forward_calls == 0

    def test_model_teacher_forwards_counted(self, small_task):
        train_set, test_set = small_task
        teacher = init_model([2, 8, 4], seed=3)
        out = distill(TrainConfig(epochs=5, seed=2, layer_sizes=(2, 8, 4)),
                      teacher, train_set, test_set)
        assert out.report.teacher_forward_calls > 0

    def test_uniform_teacher_yields_uniform_student(self, small_task):
        train_set, test_set = small_task
        teacher = zero_model([2, 8, 4])  # predicts exactly uniform everywhere
        out = distill(TrainConfig(epochs=30, seed=2, layer_sizes=(2, 8, 4)),
                      teacher, train_set, test_set)
        assert out.report.final_train_max_prob < 0.25 + 0.05

    def test_proxy_faster_than_model_teacher(self, small_task):
        train_set, test_set = small_task
        heavy = train(TrainConfig(strategy="lspp", epochs=2, seed=8,
                                  layer_sizes=(2, 128, 128, 4)), train_set, test_set)
        student = TrainConfig(epochs=30, seed=9, layer_sizes=(2, 8, 4))
        t0 = time.perf_counter()
        distill(student, heavy.model, train_set, test_set)
        model_teacher_time = time.perf_counter() - t0
        t0 = time.perf_counter()
        distill(student, heavy.cmatrix, train_set, test_set)
        proxy_time = time.perf_counter() - t0
        assert proxy_time < model_teacher_time

    def test_rejects_unknown_teacher_type(self, small_task):
        train_set, test_set = small_task
        with pytest.raises(ValueError, match="teacher"):
            distill(TrainConfig(), "not a teacher", train_set, test_set)


class TestBatchGradientConsistency:
    def test_vectorized_table_grads_match_per_sample_ops(self):
        from labelforge.labelreg import (
            c_logit_grad,
            c_logit_grad_forward,
            nontarget_indices,
        )
        from labelforge.numerics import Rng, log_softmax_rows, softmax_rows
        from labelforge.train import _accumulate_c_grads

        rng = Rng(55)
        k, b = 5, 12
        c = CMatrix(rng.uniforms((k, k - 1), -2.0, 2.0), 0.1)
        logits = rng.uniforms((b, k), -2.0, 2.0)
        probs = softmax_rows(logits)
        log_probs = log_softmax_rows(logits)
        labels = np.array([rng.next_below(k) for _ in range(b)])

        vectorized = np.zeros_like(c.logits)
        _accumulate_c_grads(vectorized, c, probs, log_probs, labels,
                            nontarget_indices(k), True, True)
        looped = np.zeros_like(c.logits)
        for i, y in enumerate(labels):
            looped[int(y)] += c_logit_grad(c, int(y), probs[i])
            looped[int(y)] += c_logit_grad_forward(c, int(y), log_probs[i])
        assert np.abs(vectorized - looped).max() < 1e-12

    def test_vectorized_reverse_dlogits_match_per_sample_op(self):
        from labelforge.labelreg import network_logit_grad_reverse, target_table
        from labelforge.numerics import Rng, softmax_rows
        from labelforge.train import _reverse_dlogits

        rng = Rng(56)
        k, b = 4, 10
        c = CMatrix(rng.uniforms((k, k - 1), -2.0, 2.0), 0.1)
        probs = softmax_rows(rng.uniforms((b, k), -2.0, 2.0))
        labels = np.array([rng.next_below(k) for _ in range(b)])
        batched = _reverse_dlogits(probs, target_table(c)[labels])
        for i, y in enumerate(labels):
            per_sample = network_logit_grad_reverse(c, int(y), probs[i])
            assert np.abs(batched[i] - per_sample).max() < 1e-12


class TestLearnedTableShape:
    def test_training_produces_asymmetric_rows(self):
        # three collinear unevenly spaced classes: the middle class confuses
        # with both neighbors, the outer ones mostly with the middle, so the
        # learned table has no reason to come out symmetric
        means = np.array([[0.0, 0.0], [1.0, 0.0], [4.0, 0.0]])
        train_set = generate_gaussian(GaussianSpec(means, 0.6, 80, seed=401))
        test_set = generate_gaussian(GaussianSpec(means, 0.6, 40, seed=402))
        out = train(TrainConfig(strategy="lspp", epochs=80, seed=1,
                                layer_sizes=(2, 16, 3)), train_set, test_set)
        expanded = out.cmatrix.expanded_probs()
        assert np.abs(expanded - expanded.T).max() > 1e-3


class TestGradientCheckHarness:
    def test_small_errors_on_random_instance(self):
        out = gradient_check(num_classes=4, seed=21, hidden_sizes=(6,), batch_size=6)
        assert out["network_max_rel_err"] < 1e-6
        assert out["cmatrix_max_rel_err"] < 1e-6


class TestRunArtifacts:
    def test_writes_expected_files(self, small_task, tmp_path):
        train_set, test_set = small_task
        cfg = TrainConfig(strategy="lspp", epochs=4, seed=11, layer_sizes=(2, 8, 4))
        resolved = cfg.resolved(2, 4)
        result = train(resolved, train_set, test_set)
        run_dir = tmp_path / "run"
        write_run_artifacts(run_dir, resolved, result)
        for name in ("config.json", "metrics.csv", "checkpoint.json", "report.json",
                     "cmatrix.csv", "cmatrix.json"):
            assert (run_dir / name).exists(), name
        report = json.loads((run_dir / "report.json").read_text())
        assert "c_row_entropy" in report
        assert len(report["epochs"]) == 4
        config = json.loads((run_dir / "config.json").read_text())
        assert config["alpha"] == 0.1
        assert config["c_lr"] == config["lr"]
        header = (run_dir / "metrics.csv").read_text().splitlines()[0]
        assert header == "epoch,train_acc,test_acc,train_loss,mean_max_prob"

    def test_no_cmatrix_files_for_onehot(self, small_task, tmp_path):
        train_set, test_set = small_task
        cfg = TrainConfig(strategy="onehot", epochs=2, seed=1).resolved(2, 4)
        result = train(cfg, train_set, test_set)
        run_dir = tmp_path / "run2"
        write_run_artifacts(run_dir, cfg, result)
        assert not (run_dir / "cmatrix.csv").exists()
