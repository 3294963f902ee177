"""Tests for the attack objectives and optimizers."""
from collections import Counter

import numpy as np
import pytest
import torch
from pydantic import ValidationError

from src.attack_engine import AttackEngine, _sampler, same_trajectory
from src.exceptions import ConfigurationError, StateError
from src.images import caption_shots
from src.models import (
    AttackConfig, AttackMethod, AttackMode, Objective, PromptBatching, PromptInit
)
from src.perturbation import apply, ascend_prompt, init_visual, project
from src.toy_vlm import ToyVLM
from tests.helpers import ImageCoupledModel, small_corpus

EPS = 16 / 255
PROMPTS = small_corpus()[:4]


def make_config(method=AttackMethod.MULTI_P, prompts=PROMPTS, **overrides) -> AttackConfig:
    values = dict(
        method=method,
        prompt_set=list(prompts),
        epsilon=EPS,
        alpha1=1 / 255,
        alpha2=0.001,
        iterations=12,
        update_interval=3,
        seed=0,
        objective=Objective(target_text="unknown"),
    )
    values.update(overrides)
    return AttackConfig(**values)


def same_image_path(a, b) -> bool:
    """Equal visual trajectories; prompt perturbations are ignored."""
    return a.trace == b.trace and torch.equal(a.visual.delta, b.visual.delta)


class TestObjective:
    """Targeted and non-targeted losses."""

    def setup_method(self):
        """Set up test fixtures."""
        self.targeted = Objective(target_text="unknown")

    def test_targeted_loss_is_a_direct_lm_loss(self, tiny_model, tiny_image):
        """The objective wrapper adds nothing to lm_loss."""
        engine = AttackEngine(tiny_model)
        embedding = tiny_model.embed_prompt(tiny_model.tokenizer.tokenize(PROMPTS[0]))
        direct = tiny_model.lm_loss(tiny_image, embedding, tiny_model.tokenizer.target_ids("unknown"))
        assert torch.equal(engine.objective_loss(self.targeted, tiny_image, embedding, 0), direct)

    def test_nontargeted_with_target_output_equals_targeted(self, tiny_model, tiny_image):
        """Clean outputs equal to the target text give the targeted loss."""
        engine = AttackEngine(tiny_model)
        embedding = tiny_model.embed_prompt(tiny_model.tokenizer.tokenize(PROMPTS[1]))
        nontargeted = Objective(mode=AttackMode.NON_TARGETED, target_text=None, clean_outputs={3: "unknown"})
        assert torch.equal(
            engine.objective_loss(nontargeted, tiny_image, embedding, 3),
            engine.objective_loss(self.targeted, tiny_image, embedding, 3)
        )

    def test_missing_clean_output(self, tiny_model, tiny_image):
        """A non-targeted objective without the prompt's clean output is a state error."""
        engine = AttackEngine(tiny_model)
        embedding = tiny_model.embed_prompt(tiny_model.tokenizer.tokenize(PROMPTS[0]))
        objective = Objective(mode=AttackMode.NON_TARGETED, target_text=None)
        with pytest.raises(StateError, match="No clean output"):
            engine.objective_loss(objective, tiny_image, embedding, 0)

    def test_targeted_needs_text(self):
        with pytest.raises(ValidationError):
            Objective(mode=AttackMode.TARGETED, target_text="  ")


class TestCleanOutputs:
    """Greedy predictions cached for the non-targeted objective."""

    def test_entries_match_independent_generation(self, tiny_model, tiny_image):
        engine = AttackEngine(tiny_model)
        outputs = engine.precompute_clean_outputs(tiny_image, PROMPTS)
        assert set(outputs) == set(range(len(PROMPTS)))
        for i, prompt in enumerate(PROMPTS):
            assert outputs[i] == tiny_model.generate(tiny_image, tiny_model.tokenizer.tokenize(prompt))
        assert outputs == engine.precompute_clean_outputs(tiny_image, PROMPTS)

    def test_constant_model_gives_equal_entries(self, tiny_spec, small_tokenizer, tiny_image):
        model = ToyVLM(tiny_spec, small_tokenizer, seed=0)
        with torch.no_grad():
            model.lm_head.weight.zero_()
            model.lm_head.bias.zero_()
            model.lm_head.bias[small_tokenizer.vocab["cat"]] = 1.0
        model.freeze()
        outputs = AttackEngine(model).precompute_clean_outputs(tiny_image, PROMPTS)
        assert len(set(outputs.values())) == 1


class TestSingleP:
    """Optimization against one prompt."""

    def test_one_step_hand_computation(self, tiny_model, tiny_image):
        """K=1: delta = project(init - alpha1 * sign(g))."""
        config = make_config(AttackMethod.SINGLE_P, PROMPTS[:1], iterations=1)
        run = AttackEngine(tiny_model).run(config, tiny_image)

        init = init_visual(tiny_image, EPS, seed=0).delta
        embedding = tiny_model.embed_prompt(tiny_model.tokenizer.tokenize(PROMPTS[0]))
        target = tiny_model.tokenizer.target_ids("unknown")
        grads = tiny_model.loss_and_grads(apply(tiny_image, init), embedding, target)
        expected = project(init - (1 / 255) * torch.sign(grads.image_grad), tiny_image, EPS)
        assert torch.equal(run.visual.delta, expected)
        assert run.trace[0].loss == grads.loss
        assert run.trace[0].prompt_index == 0

    def test_zero_step_size_keeps_init(self, tiny_model, tiny_image):
        """alpha1 = 0 leaves delta at its initial value for every step."""
        run = AttackEngine(tiny_model).run(
            make_config(AttackMethod.SINGLE_P, PROMPTS[:1], alpha1=0.0), tiny_image
        )
        assert torch.equal(run.visual.delta, init_visual(tiny_image, EPS, seed=0).delta)

    def test_seeded_runs_are_identical(self, tiny_model, tiny_image):
        engine = AttackEngine(tiny_model)
        config = make_config(AttackMethod.SINGLE_P, PROMPTS[:1])
        assert same_trajectory(engine.run(config, tiny_image), engine.run(config, tiny_image))

    def test_requires_one_prompt(self, tiny_model, tiny_image):
        """Single-P with k != 1 is a configuration error."""
        with pytest.raises(ConfigurationError, match="exactly one prompt"):
            AttackEngine(tiny_model).run_single_p(make_config(), tiny_image)
        with pytest.raises(ValidationError):
            make_config(AttackMethod.SINGLE_P, PROMPTS)


class TestReductions:
    """Bitwise equalities between methods under a shared seed."""

    def test_single_p_equals_multi_p_with_one_prompt(self, tiny_model, tiny_image):
        engine = AttackEngine(tiny_model)
        single = engine.run(make_config(AttackMethod.SINGLE_P, PROMPTS[:1]), tiny_image)
        multi = engine.run(make_config(AttackMethod.MULTI_P, PROMPTS[:1]), tiny_image)
        assert same_trajectory(single, multi)

    def test_cropa_without_prompt_steps_equals_multi_p(self, tiny_model, tiny_image):
        """alpha2 = 0 or N > K reduce CroPA to Multi-P."""
        engine = AttackEngine(tiny_model)
        multi = engine.run(make_config(AttackMethod.MULTI_P), tiny_image)
        zero_step = engine.run(make_config(AttackMethod.CROPA, alpha2=0.0), tiny_image)
        no_update = engine.run(make_config(AttackMethod.CROPA, update_interval=13), tiny_image)
        assert same_image_path(multi, zero_step)
        assert same_image_path(multi, no_update)
        assert all(torch.count_nonzero(e) == 0 for e in no_update.prompt.entries.values())

    def test_joint_without_prompt_steps_equals_multi_p(self, tiny_model, tiny_image):
        engine = AttackEngine(tiny_model)
        multi = engine.run(make_config(AttackMethod.MULTI_P), tiny_image)
        joint = engine.run(make_config(AttackMethod.CROPA_JOINT, alpha2=0.0), tiny_image)
        assert same_image_path(multi, joint)

    def test_joint_differs_from_cropa_every_step(self, tiny_model):
        """Joint takes the prompt gradient before the image step, CroPA with N=1 after it."""
        model = ImageCoupledModel(tiny_model)
        gray = torch.full((8, 8, 3), 0.5, dtype=torch.float64)
        step = dict(alpha1=EPS, alpha2=0.05, iterations=1)
        cropa = AttackEngine(model).run(make_config(AttackMethod.CROPA, PROMPTS[:1], update_interval=1, **step), gray)
        joint = AttackEngine(model).run(make_config(AttackMethod.CROPA_JOINT, PROMPTS[:1], **step), gray)

        target = tiny_model.tokenizer.target_ids("unknown")
        embedding = tiny_model.embed_prompt(tiny_model.tokenizer.tokenize(PROMPTS[0]))
        delta = init_visual(gray, EPS, seed=0).delta
        before = apply(gray, delta)
        image_grad = tiny_model.loss_and_grads(before, embedding, target).image_grad
        after = apply(gray, delta - EPS * torch.sign(image_grad))
        zero = torch.zeros_like(embedding.vectors)
        expected_joint = ascend_prompt(zero, ImageCoupledModel.prompt_grad(before, embedding), 0.05)
        expected_cropa = ascend_prompt(zero, ImageCoupledModel.prompt_grad(after, embedding), 0.05)

        assert torch.equal(joint.prompt.entries[0], expected_joint)
        assert torch.equal(cropa.prompt.entries[0], expected_cropa)
        assert torch.equal(joint.visual.delta, cropa.visual.delta)
        assert not torch.equal(expected_joint, expected_cropa)
        assert not same_trajectory(cropa, joint)

        longer = dict(alpha1=EPS, alpha2=0.05, iterations=12)
        cropa = AttackEngine(model).run(make_config(AttackMethod.CROPA, update_interval=1, **longer), gray)
        joint = AttackEngine(model).run(make_config(AttackMethod.CROPA_JOINT, **longer), gray)
        assert [t.prompt_index for t in cropa.trace] == [t.prompt_index for t in joint.trace]
        assert not same_trajectory(cropa, joint)


class TestSampling:
    """Prompt sampling stream."""

    def test_uniform_counts(self):
        """Per-prompt counts over 10000 draws lie within 3 sigma of K/k."""
        k, draws = 10, 10_000
        rng = _sampler(0)
        counts = Counter(int(rng.integers(k)) for _ in range(draws))
        sigma = np.sqrt(draws * (1 / k) * (1 - 1 / k))
        assert set(counts) == set(range(k))
        assert all(abs(c - draws / k) <= 3 * sigma for c in counts.values())

    def test_trace_records_sampled_prompts(self, tiny_model, tiny_image):
        run = AttackEngine(tiny_model).run(make_config(iterations=20), tiny_image)
        assert [t.step for t in run.trace] == list(range(1, 21))
        assert all(0 <= t.prompt_index < len(PROMPTS) for t in run.trace)


class TestCroPA:
    """Min-max optimization with per-prompt embedding perturbations."""

    def test_entries_exist_only_for_visited_prompts(self, tiny_model, tiny_image):
        run = AttackEngine(tiny_model).run(make_config(AttackMethod.CROPA, iterations=3), tiny_image)
        assert set(run.prompt.entries) == {t.prompt_index for t in run.trace}

    def test_two_step_hand_computation(self, tiny_model, tiny_image):
        """One prompt, N=1, K=2: each step descends the image then ascends the prompt."""
        config = make_config(AttackMethod.CROPA, PROMPTS[:1], iterations=2, update_interval=1, alpha2=0.01)
        run = AttackEngine(tiny_model).run(config, tiny_image)

        target = tiny_model.tokenizer.target_ids("unknown")
        clean = tiny_model.embed_prompt(tiny_model.tokenizer.tokenize(PROMPTS[0]))
        delta = init_visual(tiny_image, EPS, seed=0).delta
        entry = torch.zeros_like(clean.vectors)
        losses = []
        for _ in range(2):
            perturbed = type(clean)(clean.vectors + entry, clean.token_ids)
            result = tiny_model.loss_and_grads(apply(tiny_image, delta), perturbed, target)
            losses.append(result.loss)
            delta = delta - (1 / 255) * torch.sign(result.image_grad)
            stepped = tiny_model.loss_and_grads(apply(tiny_image, delta), perturbed, target)
            entry = ascend_prompt(entry, stepped.prompt_grad, 0.01)
            delta = project(delta, tiny_image, EPS)

        assert [t.loss for t in run.trace] == losses
        assert torch.equal(run.visual.delta, delta)
        assert torch.equal(run.prompt.entries[0], entry)

    def test_prompt_ascent_does_not_lower_loss(self, tiny_model, tiny_image):
        """A small signed ascent step on the prompt never lowers the objective to first order."""
        target = tiny_model.tokenizer.target_ids("unknown")
        for prompt in PROMPTS:
            embedding = tiny_model.embed_prompt(tiny_model.tokenizer.tokenize(prompt))
            result = tiny_model.loss_and_grads(tiny_image, embedding, target)
            assert float((result.prompt_grad * torch.sign(result.prompt_grad)).sum()) >= 0.0
            moved = type(embedding)(ascend_prompt(embedding.vectors, result.prompt_grad, 1e-7), embedding.token_ids)
            assert float(tiny_model.lm_loss(tiny_image, moved, target)) >= result.loss - 1e-12

    def test_gaussian_prompt_init(self, tiny_model, tiny_image):
        run = AttackEngine(tiny_model).run(
            make_config(AttackMethod.CROPA, prompt_init=PromptInit.GAUSSIAN, prompt_init_sigma=0.01,
                        update_interval=100),
            tiny_image
        )
        assert all(torch.count_nonzero(e) > 0 for e in run.prompt.entries.values())

    def test_cropa_rejects_summed_batches(self, tiny_model, tiny_image):
        config = make_config()
        config = config.model_copy(update={"batch_prompts": PromptBatching.ALL})
        with pytest.raises(ConfigurationError, match="samples one prompt"):
            AttackEngine(tiny_model).run_cropa(config, tiny_image)


class TestBudgetInvariant:
    """Every iteration of every method stays inside the budget."""

    @pytest.mark.parametrize("method", list(AttackMethod))
    def test_final_delta_is_feasible(self, method, tiny_model, tiny_image):
        prompts = PROMPTS[:1] if method == AttackMethod.SINGLE_P else PROMPTS
        run = AttackEngine(tiny_model).run(
            make_config(method, prompts, iterations=40, alpha1=4 / 255, update_interval=2), tiny_image
        )
        assert len(run.trace) == 40
        assert float(run.visual.delta.abs().max()) <= EPS + 1e-12
        adversarial = run.adversarial_image
        assert float(adversarial.min()) >= 0.0 and float(adversarial.max()) <= 1.0

    def test_checkpoints_match_shorter_runs(self, tiny_model, tiny_image):
        engine = AttackEngine(tiny_model)
        long_run = engine.run(make_config(AttackMethod.CROPA, checkpoint_steps=[6, 3]), tiny_image)
        assert sorted(long_run.checkpoints) == [3, 6]
        short = engine.run(make_config(AttackMethod.CROPA, iterations=6), tiny_image)
        snapshot = long_run.checkpoints[6]
        assert torch.equal(snapshot.visual.delta, short.visual.delta)
        assert set(snapshot.prompt.entries) == set(short.prompt.entries)


class TestResume:
    """Continuing a run equals running longer from the start."""

    def test_resume_equals_long_run(self, tiny_model, tiny_image):
        engine = AttackEngine(tiny_model)
        full = engine.run(make_config(AttackMethod.CROPA, iterations=15), tiny_image)
        partial = engine.run(make_config(AttackMethod.CROPA, iterations=9), tiny_image)
        resumed = engine.resume(partial, 6)
        assert same_trajectory(resumed, full)
        assert resumed.config.iterations == 15

    def test_chained_resumes(self, tiny_model, tiny_image):
        engine = AttackEngine(tiny_model)
        full = engine.run(make_config(AttackMethod.CROPA_JOINT, iterations=12), tiny_image)
        run = engine.run(make_config(AttackMethod.CROPA_JOINT, iterations=3), tiny_image)
        for extra in (4, 2, 3):
            run = engine.resume(run, extra)
        assert same_trajectory(run, full)

    def test_resume_zero_is_identity(self, tiny_model, tiny_image):
        engine = AttackEngine(tiny_model)
        run = engine.run(make_config(iterations=5), tiny_image)
        assert same_trajectory(engine.resume(run, 0), run)

    def test_missing_resume_state(self, tiny_model, tiny_image):
        engine = AttackEngine(tiny_model)
        run = engine.run(make_config(iterations=2, resumable=False), tiny_image)
        with pytest.raises(StateError, match="resume checkpoint"):
            engine.resume(run, 1)


class TestNonTargeted:
    """Non-targeted mode pushes predictions away from the clean outputs."""

    def test_clean_outputs_are_precomputed(self, tiny_model, tiny_image):
        engine = AttackEngine(tiny_model)
        config = make_config(objective=Objective(mode=AttackMode.NON_TARGETED, target_text=None))
        run = engine.run(config, tiny_image)
        assert run.config.objective.clean_outputs == engine.precompute_clean_outputs(tiny_image, PROMPTS)

    def test_image_ascends_the_loss(self, tiny_model, tiny_image):
        """One Single-P step moves delta along +sign(g) in non-targeted mode."""
        engine = AttackEngine(tiny_model)
        objective = Objective(mode=AttackMode.NON_TARGETED, target_text=None)
        config = make_config(AttackMethod.SINGLE_P, PROMPTS[:1], iterations=1, objective=objective)
        run = engine.run(config, tiny_image)

        init = init_visual(tiny_image, EPS, seed=0).delta
        clean_output = run.config.objective.clean_outputs[0]
        embedding = tiny_model.embed_prompt(tiny_model.tokenizer.tokenize(PROMPTS[0]))
        grad = tiny_model.loss_and_grads(
            apply(tiny_image, init), embedding, tiny_model.tokenizer.target_ids(clean_output)
        ).image_grad
        expected = project(init + (1 / 255) * torch.sign(grad), tiny_image, EPS)
        assert torch.equal(run.visual.delta, expected)


class TestConfigurationChecks:
    """Preconditions checked before optimizing."""

    def test_shots_count_must_match(self, tiny_model, tiny_image):
        shots = caption_shots(0, 1, size=8, dtype=torch.float64)
        with pytest.raises(ConfigurationError, match="training shots"):
            AttackEngine(tiny_model).run(make_config(), tiny_image, shots)

    def test_attack_with_training_shots(self, tiny_model, tiny_image):
        shots = caption_shots(0, 2, size=8, dtype=torch.float64)
        run = AttackEngine(tiny_model).run(make_config(shots_at_train=2, iterations=3), tiny_image, shots)
        assert len(run.shots) == 2 and len(run.trace) == 3

    def test_target_outside_vocabulary(self, tiny_model, tiny_image):
        config = make_config(objective=Objective(target_text="zebra crossing"))
        with pytest.raises(ConfigurationError, match="not covered"):
            AttackEngine(tiny_model).run(config, tiny_image)

    def test_alpha1_above_epsilon(self):
        with pytest.raises(ValidationError):
            make_config(alpha1=0.5)

    def test_summed_prompt_batches(self, tiny_model, tiny_image):
        """batch_prompts=all records prompt index -1 and stays in budget."""
        run = AttackEngine(tiny_model).run(
            make_config(batch_prompts=PromptBatching.ALL, iterations=4), tiny_image
        )
        assert [t.prompt_index for t in run.trace] == [-1] * 4
        assert float(run.visual.delta.abs().max()) <= EPS + 1e-12
