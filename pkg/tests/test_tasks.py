import numpy as np
import pytest

from calmkit.nn import ContractError, ModelSpec
from calmkit.tasks import (
    TaskFamily,
    TrainConfig,
    accuracy,
    build_checkpoints,
    finetune,
    generate_family,
    pretrain,
)


SMALL = TaskFamily(num_tasks=3, train_per_task=90, unlabeled_per_task=90,
                   test_per_task=90, seed=5)


@pytest.fixture(scope="module")
def default_pipeline():
    family = TaskFamily(seed=0)
    tasks, ckpt = build_checkpoints(family, TrainConfig())
    return family, tasks, ckpt


class TestFamilyValidation:
    def test_disjointness_floor(self):
        with pytest.raises(ContractError, match="disjoint"):
            TaskFamily(cluster_sep=2.0, noise_sigma=1.0, task_offset=7.9)

    def test_positive_geometry(self):
        with pytest.raises(ContractError):
            TaskFamily(cluster_sep=0.0)
        with pytest.raises(ContractError):
            TaskFamily(noise_sigma=-1.0)

    def test_classes_need_room(self):
        with pytest.raises(ContractError, match="input_dim"):
            TaskFamily(input_dim=3, classes_per_task=5)

    def test_frame_align_range(self):
        with pytest.raises(ContractError):
            TaskFamily(frame_align=1.5)


class TestGenerateFamily:
    def test_single_easy_task_is_linearly_separable(self):
        family = TaskFamily(num_tasks=1, classes_per_task=2, input_dim=4,
                            cluster_sep=30.0, noise_sigma=1.0, task_offset=36.0,
                            train_per_task=60, unlabeled_per_task=10, test_per_task=60,
                            seed=2)
        tasks = generate_family(family)
        spec = ModelSpec(4, (), 2)
        theta = pretrain(spec, tasks, epochs=30, lr=0.05, seed=2)
        assert accuracy(spec, theta, tasks[0].test) == 1.0

    def test_same_seed_bit_identical(self):
        a = generate_family(SMALL)
        b = generate_family(SMALL)
        for ta, tb in zip(a, b):
            assert np.array_equal(ta.train.inputs, tb.train.inputs)
            assert np.array_equal(ta.train.labels, tb.train.labels)
            assert np.array_equal(ta.unlabeled.inputs, tb.unlabeled.inputs)
            assert np.array_equal(ta.audit_labels, tb.audit_labels)

    def test_extreme_noise_approaches_chance(self):
        # noise >> separation: the Bayes rate collapses to 1/C
        family = TaskFamily(num_tasks=1, classes_per_task=4, input_dim=8,
                            cluster_sep=0.05, noise_sigma=40.0, task_offset=241.0,
                            train_per_task=400, unlabeled_per_task=10,
                            test_per_task=2000, seed=3)
        tasks = generate_family(family)
        rng = np.random.default_rng(3)
        # Monte-Carlo Bayes oracle: classify by nearest class mean (optimal for
        # equal spherical Gaussians) using means estimated from the train split
        means = np.stack([tasks[0].train.inputs[tasks[0].train.labels == c].mean(axis=0)
                          for c in range(4)])
        test = tasks[0].test
        nearest = np.argmin(
            ((test.inputs[:, None, :] - means[None, :, :]) ** 2).sum(axis=2), axis=1)
        bayes_acc = float(np.mean(nearest == test.labels))
        assert abs(bayes_acc - 0.25) < 0.05
        spec = ModelSpec(8, (8,), 4)
        theta = pretrain(spec, tasks, epochs=5, lr=0.001, seed=3)
        assert abs(accuracy(spec, theta, test) - 0.25) < 0.05

    def test_split_sizes_and_disjoint_roles(self):
        tasks = generate_family(SMALL)
        for t in tasks:
            assert t.train.inputs.shape == (90, SMALL.input_dim)
            assert t.test.inputs.shape == (90, SMALL.input_dim)
            assert t.unlabeled.inputs.shape == (90, SMALL.input_dim)
            assert t.unlabeled.labels is None
            assert t.audit_labels.shape == (90,)
            # separate draws: no row appears in two splits
            rows = {"train": t.train.inputs, "test": t.test.inputs,
                    "unlabeled": t.unlabeled.inputs}
            for a in rows:
                for b in rows:
                    if a < b:
                        common = set(map(tuple, rows[a])) & set(map(tuple, rows[b]))
                        assert not common

    def test_class_mean_spacing(self):
        family = TaskFamily(num_tasks=2, classes_per_task=3, input_dim=8,
                            cluster_sep=6.0, noise_sigma=0.01, task_offset=20.0,
                            train_per_task=300, unlabeled_per_task=3, test_per_task=3,
                            seed=7)
        tasks = generate_family(family)
        for t in tasks:
            means = np.stack([t.train.inputs[t.train.labels == c].mean(axis=0)
                              for c in range(3)])
            for i in range(3):
                for j in range(i + 1, 3):
                    assert abs(np.linalg.norm(means[i] - means[j]) - 6.0) < 0.05


class TestPretrain:
    def test_zero_budget_returns_init(self):
        tasks = generate_family(SMALL)
        spec = ModelSpec(SMALL.input_dim, (8,), SMALL.classes_per_task)
        a = pretrain(spec, tasks, epochs=0, seed=5)
        b = pretrain(spec, tasks, epochs=0, seed=5)
        assert np.array_equal(a.values, b.values)
        from calmkit.nn import init_params
        from calmkit.seeding import STAGE_INIT, rng_for
        reference = init_params(spec, rng_for(5, STAGE_INIT))
        assert np.array_equal(a.values, reference.values)

    def test_default_budget_above_chance_everywhere(self, default_pipeline):
        family, tasks, ckpt = default_pipeline
        chance = 1.0 / family.classes_per_task
        for t in tasks:
            assert accuracy(ckpt.spec, ckpt.pretrained, t.test) > chance

    def test_pretrain_below_individual_on_each_task(self, default_pipeline):
        family, tasks, ckpt = default_pipeline
        for t in tasks:
            pre = accuracy(ckpt.spec, ckpt.pretrained, t.test)
            own = accuracy(ckpt.spec, ckpt.finetuned[t.task_id], t.test)
            assert pre < own


class TestFinetune:
    def test_zero_epochs_gives_zero_task_vector(self):
        tasks = generate_family(SMALL)
        spec = ModelSpec(SMALL.input_dim, (8,), SMALL.classes_per_task)
        theta_pre = pretrain(spec, tasks, epochs=2, seed=5)
        theta_ft = finetune(spec, theta_pre, tasks[0], epochs=0, seed=5)
        assert np.array_equal(theta_ft.values, theta_pre.values)

    def test_own_task_accuracy_floor(self, default_pipeline):
        family, tasks, ckpt = default_pipeline
        for t in tasks:
            assert accuracy(ckpt.spec, ckpt.finetuned[t.task_id], t.test) >= 0.90

    def test_no_large_cross_task_gains(self, default_pipeline):
        # fine-tuning must stay task-specific: on every other task it may not
        # beat the pretrained model by more than 5 points
        family, tasks, ckpt = default_pipeline
        pre = [accuracy(ckpt.spec, ckpt.pretrained, t.test) for t in tasks]
        for t in range(family.num_tasks):
            for u in range(family.num_tasks):
                if u == t:
                    continue
                cross = accuracy(ckpt.spec, ckpt.finetuned[t], tasks[u].test)
                assert cross <= pre[u] + 0.05

    def test_nontrivial_task_vectors(self, default_pipeline):
        family, tasks, ckpt = default_pipeline
        for ft in ckpt.finetuned:
            assert np.linalg.norm(ft.values - ckpt.pretrained.values) > 0.0

    def test_per_task_head_mode_freezes_head(self):
        tasks = generate_family(SMALL)
        spec = ModelSpec(SMALL.input_dim, (8,), SMALL.classes_per_task)
        theta_pre = pretrain(spec, tasks, epochs=2, seed=5)
        theta_ft = finetune(spec, theta_pre, tasks[0], epochs=5, seed=5,
                            head_mode="per_task")
        head_start = spec.layer_offsets()[-1][0]
        assert np.array_equal(theta_ft.values[head_start:], theta_pre.values[head_start:])
        assert not np.array_equal(theta_ft.values[:head_start], theta_pre.values[:head_start])


class TestPipelineReproducibility:
    def test_checkpoints_bit_identical_across_runs(self):
        family = TaskFamily(num_tasks=2, train_per_task=60, unlabeled_per_task=60,
                            test_per_task=60, seed=11)
        config = TrainConfig(hidden_dims=(8,), pretrain_epochs=4, finetune_epochs=40,
                             accuracy_floor=0.3)
        _, a = build_checkpoints(family, config)
        _, b = build_checkpoints(family, config)
        assert np.array_equal(a.pretrained.values, b.pretrained.values)
        for fa, fb in zip(a.finetuned, b.finetuned):
            assert np.array_equal(fa.values, fb.values)

    def test_floor_violation_reported(self):
        family = TaskFamily(num_tasks=2, train_per_task=60, unlabeled_per_task=60,
                            test_per_task=60, seed=11)
        config = TrainConfig(hidden_dims=(8,), pretrain_epochs=0, finetune_epochs=0)
        with pytest.raises(ContractError, match="below the floor"):
            build_checkpoints(family, config)
