import numpy as np
from django.test import SimpleTestCase

from koopman.exceptions import EigenIndexError, InsufficientData, WindingUndefined
from koopman.models import KalikoModel, OdeSystem
from koopman.services import AnalysisService, SimulationService

from .factories import linear_identity_model, rotation, tiny_config


class SpectrumTests(SimpleTestCase):

    def test_fresh_model_spectrum(self):
        model = KalikoModel(tiny_config(delays=2, latent_dim=2), state_dim=2)
        pairs = AnalysisService.eig(model.dynamics.matrix())
        self.assertEqual(len(pairs), 4)
        self.assertAlmostEqual(pairs[0].modulus, 0.99, places=12)
        moduli = [pair.modulus for pair in pairs]
        self.assertEqual(moduli, sorted(moduli, reverse=True))

    def test_pairs_are_biorthogonal(self):
        A = np.random.default_rng(7).normal(size=(5, 5))
        pairs = AnalysisService.eig(A)
        for pair in pairs:
            np.testing.assert_allclose(A @ pair.right, pair.value * pair.right, atol=1e-10)
            self.assertAlmostEqual(abs(np.vdot(pair.left, pair.right)), 1.0, places=8)

    def test_conjugate_pairs_put_positive_imaginary_first(self):
        pairs = AnalysisService.eig(rotation(0.3, radius=0.9))
        self.assertGreater(pairs[0].value.imag, 0.0)
        self.assertAlmostEqual(pairs[0].value, np.conj(pairs[1].value))

    def test_single_delay_diagonal_block(self):
        model = KalikoModel(tiny_config(delays=1, latent_dim=3), state_dim=2)
        model.dynamics.blocks.assign(np.diag([0.9, -0.3, 0.5]).reshape(1, 3, 3))
        values = np.array([pair.value for pair in AnalysisService.eig(model.dynamics.matrix())])
        np.testing.assert_array_equal(values.imag, np.zeros(3))
        np.testing.assert_array_equal(values.real, [0.9, 0.5, -0.3])

    def test_complex_eigenvalues_come_in_conjugate_pairs(self):
        A = np.random.default_rng(21).normal(size=(12, 12))
        values = np.array([pair.value for pair in AnalysisService.eig(A)])
        complex_values = values[np.abs(values.imag) > 1e-12]
        self.assertGreater(len(complex_values), 0)
        for value in complex_values:
            self.assertLess(np.min(np.abs(values - np.conj(value))), 1e-10)

    def test_left_vectors_are_eigenvectors(self):
        A = np.random.default_rng(7).normal(size=(5, 5))
        for pair in AnalysisService.eig(A):
            residual = pair.left.conj() @ A - pair.value * pair.left.conj()
            self.assertLess(np.linalg.norm(residual) / np.linalg.norm(pair.left), 1e-9)

    def test_mode_projector(self):
        A = np.random.default_rng(8).normal(size=(4, 4))
        pairs = AnalysisService.eig(A)
        P = AnalysisService.mode_projector(pairs[0])
        np.testing.assert_allclose(P @ pairs[0].right, pairs[0].right, atol=1e-10)
        np.testing.assert_allclose(P @ P, P, atol=1e-10)
        np.testing.assert_allclose(P @ pairs[-1].right, np.zeros(4), atol=1e-10)

    def test_select_pair_bounds(self):
        pairs = AnalysisService.eig(np.eye(2) * 0.5)
        self.assertIs(AnalysisService.select_pair(pairs, 1), pairs[1])
        for index in (2, -1):
            with self.assertRaises(EigenIndexError):
                AnalysisService.select_pair(pairs, index)


class WindingNumberTests(SimpleTestCase):

    def test_counter_clockwise_circle(self):
        values = np.exp(2j * np.pi * np.arange(50) / 50)
        self.assertEqual(AnalysisService.winding_number(values), 1)
        self.assertEqual(AnalysisService.winding_number(values[::-1]), -1)

    def test_double_loop(self):
        values = np.exp(4j * np.pi * np.arange(100) / 100)
        self.assertEqual(AnalysisService.winding_number(values), 2)

    def test_trace_away_from_the_origin(self):
        values = 3.0 + np.exp(2j * np.pi * np.arange(50) / 50)
        self.assertEqual(AnalysisService.winding_number(values), 0)

    def test_trace_through_zero(self):
        values = np.exp(2j * np.pi * np.arange(50) / 50)
        values[10] = 0.0
        with self.assertRaises(WindingUndefined):
            AnalysisService.winding_number(values)

    def test_missing_values(self):
        values = np.exp(2j * np.pi * np.arange(50) / 50)
        values[3] = np.nan
        with self.assertRaises(WindingUndefined):
            AnalysisService.winding_number(values)


class ImplicitEncodingTests(SimpleTestCase):
    """With an identity decoder and near-exact measurements the latent of x is x itself."""

    def setUp(self):
        self.system = OdeSystem('vdp')
        self.model = linear_identity_model(rotation(0.05), log_q=0.0)
        self.pair = AnalysisService.eig(self.model.dynamics.matrix())[0]

    def test_latent_is_the_state(self):
        for x in ([0.5, -1.0], [2.0, 0.3]):
            z = AnalysisService.implicit_encode(self.model, x, self.system)
            np.testing.assert_allclose(z, x, atol=1e-6)

    def test_warmup_shorter_than_a_window(self):
        model = KalikoModel(tiny_config(delays=3), state_dim=2)
        with self.assertRaises(InsufficientData):
            AnalysisService.implicit_encode(model, [0.0, 1.0], self.system, warmup=2)

    def test_diverging_history_is_marked_missing(self):
        latents = AnalysisService.encode_points(self.model, self.system, [[0.5, 0.5], [50.0, 0.0]], warmup=10)
        self.assertTrue(np.all(np.isfinite(latents[0])))
        self.assertTrue(np.all(np.isnan(latents[1])))

    def test_eigenfunction_field(self):
        axes = AnalysisService.grid_axes([(-1.0, 1.0), (-0.5, 0.5)], 3)
        field = AnalysisService.eigenfunction_field(self.model, self.pair, axes, self.system)
        self.assertEqual(field.shape, (3, 3))
        self.assertEqual(field.missing, 0)
        expected = (field.points() @ self.pair.left.conj()).reshape(3, 3)
        np.testing.assert_allclose(field.values, expected, atol=1e-6)

    def test_eigenfunction_is_linear_in_the_left_vector(self):
        axes = AnalysisService.grid_axes([(-1.0, 1.0), (-0.5, 0.5)], 3)
        field = AnalysisService.eigenfunction_field(self.model, self.pair, axes, self.system)

        doubled = AnalysisService.eigenfunction_field(self.model, self.pair.scaled(2.0), axes, self.system)
        np.testing.assert_array_equal(doubled.values / 2.0, field.values)

        unit = np.exp(0.7j)
        rotated = AnalysisService.eigenfunction_field(self.model, self.pair.scaled(unit), axes, self.system)
        # phi = w^H z, so the factor enters conjugated
        np.testing.assert_allclose(rotated.values, np.conj(unit) * field.values, atol=1e-12)
        np.testing.assert_allclose(np.abs(rotated.values), np.abs(field.values), atol=1e-12)

        zero = AnalysisService.eigenfunction_field(self.model, self.pair.scaled(0.0), axes, self.system)
        np.testing.assert_array_equal(zero.values, np.zeros((3, 3)))

    def test_limit_cycle_winds_once(self):
        cycle = SimulationService.periodic_orbit(self.system, [2.0, 0.0], 0.05, transient=1000)
        trace = AnalysisService.limit_cycle_trace(self.model, self.pair, cycle.states, self.system)
        self.assertEqual(len(trace.values), len(cycle))
        self.assertEqual(abs(trace.winding), 1)

    def test_mode_projection_rows(self):
        states = np.array([[0.5, 0.0], [0.0, 1.0]])
        rows = AnalysisService.koopman_mode_project(self.model, self.pair, states, self.system)
        self.assertEqual(rows.shape, (2, 4))
        np.testing.assert_array_equal(rows[:, :2], states)
        self.assertTrue(np.all(np.isfinite(rows)))


class DiagnosticTests(SimpleTestCase):

    def setUp(self):
        self.system = OdeSystem('vdp')
        self.model = linear_identity_model(rotation(0.05), log_q=0.0)
        self.axes = AnalysisService.grid_axes([(-1.0, 1.0), (-1.0, 1.0)], 3)

    def test_reconstruction_heatmap(self):
        field = AnalysisService.reconstruction_heatmap(self.model, self.system, self.axes, horizon=10)
        self.assertEqual(field.shape, (3, 3))
        self.assertLess(np.max(field.values), 1e-6)

    def test_heatmap_horizon_shorter_than_a_window(self):
        model = KalikoModel(tiny_config(delays=3, chunk=2), state_dim=2)
        with self.assertRaises(InsufficientData):
            AnalysisService.reconstruction_heatmap(model, self.system, self.axes, horizon=5)

    def test_closure_residual(self):
        states = np.array([[0.5, 0.5], [-1.0, 0.2], [0.0, 1.5]])
        summary = AnalysisService.closure_residual(self.model, self.system, states)
        self.assertEqual((summary['points'], summary['valid']), (3, 3))
        self.assertEqual(summary['residuals'].shape, (3,))
        np.testing.assert_allclose(summary['latent_norms'], np.linalg.norm(states, axis=1), atol=1e-6)
        self.assertGreaterEqual(summary['median_residual'], 0.0)

    def test_orbit_invariance(self):
        pair = AnalysisService.eig(self.model.dynamics.matrix())[0]
        orbit = SimulationService.periodic_orbit(self.system, [2.0, 0.0], 0.05, transient=1000)
        report = AnalysisService.orbit_invariance(self.model, pair, [orbit, orbit.states[:20]], self.system)
        self.assertEqual(len(report['orbits']), 2)
        self.assertEqual(report['orbits'][1]['points'], 20)
        self.assertGreater(report['orbits'][0]['mean_abs'], 0.0)
        self.assertTrue(np.isfinite(report['between_orbit_std']))
