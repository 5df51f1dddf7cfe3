import tempfile
from pathlib import Path
from unittest import mock

import numpy as np
from django.test import SimpleTestCase

from koopman.autodiff import Parameter, Tensor, finite_diff_check
from koopman.exceptions import InsufficientData, TrainingDiverged
from koopman.models import KalikoModel, OdeSystem
from koopman.serializers import TrainConfig
from koopman.services import AdamOptimizer, CheckpointService, KalmanService, SimulationService, TrainingService
from koopman.services.training_service import LossTerms

from .factories import tiny_config


def randomized_model(seed):
    """Micro model (m = 4, p = 4) with every tensor moved away from its initial value."""
    model = KalikoModel(tiny_config(delays=2, latent_dim=2, chunk=1, hidden=4, seed=seed), state_dim=2)
    rng = np.random.default_rng(seed)
    model.dynamics.blocks.assign(0.4 * rng.normal(size=(2, 2, 2)))
    model.noise.log_q.assign(rng.uniform(np.log(0.05), np.log(0.5), 4))
    model.noise.log_r.assign(rng.uniform(np.log(0.05), np.log(0.5), 4))
    model.prior.mu0.assign(rng.normal(size=4))
    model.prior.log_s0.assign(rng.uniform(np.log(0.2), np.log(1.0), 4))
    for block in model.decoder.blocks:
        block['fc1_b'].assign(0.1 * rng.normal(size=block['fc1_b'].shape))
        block['fc2_b'].assign(0.1 * rng.normal(size=block['fc2_b'].shape))
    return model


class ReplayOvershootLossTests(SimpleTestCase):

    def test_gradient_matches_finite_differences(self):
        for seed in range(10):
            model = randomized_model(seed)
            measurements = np.random.default_rng(100 + seed).normal(size=(3, 4))

            def loss(params):
                return TrainingService.replay_overshoot_loss(model, measurements).total

            # Coordinates with gradients below 1e-3 are compared in absolute terms
            error = finite_diff_check(loss, model.parameters(), h=1e-5, floor=1e-3)
            self.assertLess(error, 1e-4, f'seed {seed}')

    def test_terms_and_weights(self):
        model = randomized_model(0)
        measurements = np.random.default_rng(1).normal(size=(4, 4))
        terms = TrainingService.replay_overshoot_loss(model, measurements)
        self.assertAlmostEqual(terms.total.item(), terms.filter_term + terms.pred_term, places=10)
        self.assertGreater(terms.filter_term, 0.0)
        self.assertGreater(terms.pred_term, 0.0)

        weighted = TrainingService.replay_overshoot_loss(model, measurements, alpha_f=0.0, alpha_p=2.0)
        self.assertEqual(weighted.filter_term, 0.0)
        self.assertAlmostEqual(weighted.pred_term, 2.0 * terms.pred_term, places=10)

    def test_common_weight_scales_the_loss(self):
        model = randomized_model(5)
        measurements = np.random.default_rng(4).normal(size=(4, 4))
        base = TrainingService.replay_overshoot_loss(model, measurements)
        for k in (0.5, 3.0, 10.0):
            scaled = TrainingService.replay_overshoot_loss(model, measurements, alpha_f=k, alpha_p=k)
            self.assertAlmostEqual(scaled.total.item() / base.total.item(), k, places=12)
            self.assertAlmostEqual(scaled.filter_term / base.filter_term, k, places=12)
            self.assertAlmostEqual(scaled.pred_term / base.pred_term, k, places=12)

    def test_filter_term_is_the_summed_squared_error_of_the_predictions(self):
        model = randomized_model(3)
        measurements = np.random.default_rng(2).normal(size=(3, 4))
        terms = TrainingService.replay_overshoot_loss(model, measurements, alpha_p=0.0)

        trace = KalmanService.filter(measurements, model)
        expected = sum(np.sum((d.data - x) ** 2) for d, x in zip(trace.decoded, measurements))
        self.assertAlmostEqual(terms.filter_term, expected, places=10)


class AdamTests(SimpleTestCase):

    def test_first_step_moves_by_the_learning_rate(self):
        param = Parameter('w', [1.0, -2.0])
        optimizer = AdamOptimizer([param], learning_rate=0.1, clip_norm=None)
        param.grad = np.array([0.5, -3.0])
        optimizer.step()
        np.testing.assert_allclose(param.data, [0.9, -1.9], atol=1e-6)
        self.assertEqual(optimizer.t, 1)

    def test_clipping_reports_the_raw_norm(self):
        param = Parameter('w', [0.0, 0.0])
        optimizer = AdamOptimizer([param], learning_rate=0.1, clip_norm=1.0)
        param.grad = np.array([3.0, 4.0])
        self.assertAlmostEqual(optimizer.step(), 5.0)
        np.testing.assert_allclose(optimizer.first_moments['w'], 0.1 * np.array([0.6, 0.8]))

    def test_state_round_trip(self):
        param = Parameter('w', [1.0])
        optimizer = AdamOptimizer([param])
        param.grad = np.array([1.0])
        optimizer.step()

        other = AdamOptimizer([Parameter('w', [1.0])])
        other.load_state({'t': optimizer.t, 'm': optimizer.first_moments, 'v': optimizer.second_moments})
        self.assertEqual(other.t, 1)
        np.testing.assert_array_equal(other.second_moments['w'], optimizer.second_moments['w'])


class TrainLoopTests(SimpleTestCase):

    def setUp(self):
        self.dataset = SimulationService.sample_dataset(OdeSystem('vdp'), n_traj=4, steps=30, seed=0)
        self.config = TrainConfig(window=4, batch_size=2, steps=3, val_fraction=0.25, seed=1)

    def new_model(self):
        return KalikoModel(tiny_config(), state_dim=2, stats=self.dataset.stats)

    def test_runs_the_requested_steps(self):
        model, report = TrainingService.train(self.new_model(), self.dataset, self.config)
        self.assertEqual(model.step, 3)
        self.assertEqual([row.step for row in report.steps], [1, 2, 3])
        self.assertEqual(model.optimizer_state['t'], 3)
        self.assertEqual(report.final_metrics['trajectories'], 1)
        self.assertIn('recon_mae', report.final_metrics)
        frame = report.to_frame()
        self.assertEqual(list(frame.columns), ['step', 'loss_filter', 'loss_pred', 'grad_norm', 'wall_ms'])
        self.assertTrue(np.all(np.isfinite(frame.to_numpy())))

    def test_shift_rows_survive_training(self):
        model, _ = TrainingService.train(self.new_model(), self.dataset, self.config)
        A = model.dynamics.matrix()
        np.testing.assert_array_equal(A[:2, :2], np.zeros((2, 2)))
        np.testing.assert_array_equal(A[:2, 2:], np.eye(2))

    def test_zero_steps_leaves_parameters_untouched(self):
        model = self.new_model()
        before = {name: param.data.copy() for name, param in model.named_tensors().items()}
        model, report = TrainingService.train(model, self.dataset, self.config.model_copy(update={'steps': 0}))
        self.assertEqual(len(report), 0)
        self.assertEqual(model.step, 0)
        for name, param in model.named_tensors().items():
            np.testing.assert_array_equal(param.data, before[name])

    def test_resume_continues_the_step_counter(self):
        model, _ = TrainingService.train(self.new_model(), self.dataset, self.config)
        with tempfile.TemporaryDirectory() as tmp:
            path = CheckpointService.save(model, Path(tmp) / 'checkpoint.klko')
            resumed = CheckpointService.load(path)
        resumed, report = TrainingService.train(resumed, self.dataset, self.config)
        self.assertEqual(resumed.step, 6)
        self.assertEqual(report.steps[0].step, 4)
        self.assertEqual(resumed.optimizer_state['t'], 6)

    def test_non_finite_loss_saves_and_aborts(self):
        nan = Tensor(np.nan)
        broken = LossTerms(total=nan, filter_term=np.nan, pred_term=np.nan)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'checkpoint.klko'
            with mock.patch.object(TrainingService, 'replay_overshoot_loss', return_value=broken):
                with self.assertRaises(TrainingDiverged) as ctx:
                    TrainingService.train(self.new_model(), self.dataset, self.config, checkpoint_path=path)
            self.assertTrue(path.is_file())
            self.assertEqual(CheckpointService.load(path).step, 0)
        self.assertEqual(ctx.exception.step, 1)
        self.assertEqual(ctx.exception.checkpoint_path, path)

    def test_window_longer_than_every_trajectory(self):
        with self.assertRaises(InsufficientData):
            TrainingService.train(self.new_model(), self.dataset, self.config.model_copy(update={'window': 200}))

    def test_fixed_seed_gives_an_identical_report(self):
        first = TrainingService.train(self.new_model(), self.dataset, self.config)[1]
        second = TrainingService.train(self.new_model(), self.dataset, self.config)[1]
        columns = ['step', 'loss_filter', 'loss_pred', 'grad_norm']
        np.testing.assert_array_equal(first.to_frame()[columns].to_numpy(), second.to_frame()[columns].to_numpy())
        self.assertEqual(first.final_metrics, second.final_metrics)
