import numpy as np
from django.test import SimpleTestCase, override_settings

from koopman.autodiff import Parameter, Tensor, backward, finite_diff_check, ops
from koopman.exceptions import NonFiniteGradient, NonFiniteValue, SingularMatrix


class BackwardRuleTests(SimpleTestCase):
    """Analytic gradients of each op agree with central differences."""

    def setUp(self):
        self.rng = np.random.default_rng(7)

    def param(self, name, *shape):
        return Parameter(name, self.rng.normal(size=shape))

    def test_matmul_add_and_transpose(self):
        a, b, c = self.param('a', 3, 4), self.param('b', 4, 2), self.param('c', 2)

        def f(params):
            a, b, c = params
            out = ops.add(ops.matmul(a, b), c)
            return ops.sum(ops.mul(out, ops.matmul(ops.transpose(b), ops.transpose(a)).T))

        self.assertLess(finite_diff_check(f, [a, b, c]), 1e-5)

    def test_matrix_vector_products(self):
        a, v = self.param('a', 3, 3), self.param('v', 3)

        def f(params):
            a, v = params
            return ops.sum(ops.mul(ops.matmul(a, v), ops.matmul(v, a)))

        self.assertLess(finite_diff_check(f, [a, v]), 1e-5)

    def test_batched_matmul_broadcasts_weights(self):
        x, w = self.param('x', 5, 2, 3), self.param('w', 3, 4)

        def f(params):
            x, w = params
            return ops.sum(ops.exp(ops.scale(ops.matmul(x, w), 0.3)))

        self.assertLess(finite_diff_check(f, [x, w]), 1e-5)

    def test_linear_solve_against_spd_matrix(self):
        m, b = self.param('m', 3, 3), self.param('b', 3, 2)
        weights = Tensor(self.rng.normal(size=(3, 2)))

        def f(params):
            m, b = params
            spd = ops.add(ops.matmul(m, ops.transpose(m)), ops.eye(3))
            return ops.sum(ops.mul(ops.linear_solve(ops.symmetrize(spd), b), weights))

        self.assertLess(finite_diff_check(f, [m, b]), 1e-5)

    def test_gelu_and_its_derivative(self):
        x = self.param('x', 6)

        def f(params):
            (x,) = params
            return ops.sum(ops.add(ops.gelu(x), ops.mul(ops.gelu_grad(x), x)))

        self.assertLess(finite_diff_check(f, [x]), 1e-5)

    def test_depthwise_mixing(self):
        x, w = self.param('x', 4, 3), self.param('w', 3, 4, 4)

        def f(params):
            x, w = params
            return ops.sum(ops.gelu(ops.depthwise(x, w)))

        self.assertLess(finite_diff_check(f, [x, w]), 1e-5)

    def test_slicing_concat_reshape_diag(self):
        v = self.param('v', 6)

        def f(params):
            (v,) = params
            head, tail = v[:2], v[2:]
            joined = ops.concat([tail, ops.scale(head, 2.0)], axis=0)
            square = ops.reshape(joined, (2, 3))
            return ops.add(ops.sum(ops.exp(ops.diag(v[1:4]))), ops.mse(square, Tensor(np.ones((2, 3)))))

        self.assertLess(finite_diff_check(f, [v]), 1e-5)

    def test_gradient_check_rejects_bad_step(self):
        with self.assertRaises(ValueError):
            finite_diff_check(lambda params: ops.sum(params[0]), [self.param('a', 2)], h=1e-2)


class TapeTests(SimpleTestCase):

    def test_gradients_accumulate_across_backward_calls(self):
        p = Parameter('p', [1.0, 2.0])
        loss = ops.sum(ops.mul(p, p))
        backward(loss)
        backward(loss)
        np.testing.assert_allclose(p.grad, [4.0, 8.0])
        p.zero_grad()
        np.testing.assert_array_equal(p.grad, [0.0, 0.0])

    def test_shared_subexpression_gets_both_contributions(self):
        p = Parameter('p', [3.0])
        square = ops.mul(p, p)
        backward(ops.sum(ops.add(square, square)))
        np.testing.assert_allclose(p.grad, [12.0])

    def test_constants_receive_no_gradient(self):
        p = Parameter('p', [1.0])
        c = Tensor([5.0])
        backward(ops.sum(ops.mul(p, c)))
        self.assertFalse(c.requires_grad)
        np.testing.assert_allclose(p.grad, [5.0])

    def test_backward_requires_scalar(self):
        with self.assertRaises(ValueError):
            backward(ops.mul(Parameter('p', [1.0, 2.0]), Tensor([1.0, 1.0])))

    def test_assign_checks_shape(self):
        p = Parameter('p', np.zeros(3))
        with self.assertRaises(ValueError):
            p.assign(np.zeros(4))

    def test_non_finite_gradient_names_the_parameter(self):
        p = Parameter('decoder.block0.fc1.bias', [0.0])
        # inf * 0 in the backward rule of scale
        loss = ops.sum(ops.mul(ops.exp(ops.scale(p, 0.0)), Tensor([np.inf])))
        with np.errstate(invalid='ignore'):
            with self.assertRaises(NonFiniteGradient) as ctx:
                backward(loss)
        self.assertEqual(ctx.exception.parameter_name, 'decoder.block0.fc1.bias')

    @override_settings(KALIKO_AUTODIFF_DEBUG=True)
    def test_debug_mode_rejects_non_finite_forward_values(self):
        with np.errstate(over='ignore'):
            with self.assertRaises(NonFiniteValue):
                ops.exp(Parameter('p', [1e4]))


class LinearSolveTests(SimpleTestCase):

    def test_solution_matches_dense_solve(self):
        rng = np.random.default_rng(0)
        factor = rng.normal(size=(4, 4))
        spd = factor @ factor.T + np.eye(4)
        rhs = rng.normal(size=4)
        x = ops.linear_solve(Tensor(spd), Tensor(rhs))
        np.testing.assert_allclose(x.data, np.linalg.solve(spd, rhs), rtol=1e-12)

    def test_singular_matrix_is_rejected(self):
        with self.assertRaises(SingularMatrix):
            ops.linear_solve(Tensor(np.array([[1.0, 1.0], [1.0, 1.0]])), Tensor(np.ones(2)))

    def test_tiny_pivot_is_rejected(self):
        with self.assertRaises(SingularMatrix):
            ops.linear_solve(Tensor(np.diag([1.0, 1e-14])), Tensor(np.ones(2)))


def random_shape(rng, *names):
    return {name: int(rng.integers(1, 9)) for name in names}


def matmul_case(rng):
    d = random_shape(rng, 'm', 'k', 'n')
    a, b = Parameter('a', rng.normal(size=(d['m'], d['k']))), Parameter('b', rng.normal(size=(d['k'], d['n'])))
    target = rng.normal(size=(d['m'], d['n']))
    return [a, b], lambda params: ops.mse(ops.matmul(*params), Tensor(target))


def elementwise_case(op):
    def case(rng):
        d = random_shape(rng, 'm', 'n')
        a, b = Parameter('a', rng.normal(size=(d['m'], d['n']))), Parameter('b', rng.normal(size=(d['m'], d['n'])))
        target = rng.normal(size=(d['m'], d['n']))
        return [a, b], lambda params: ops.mse(op(*params), Tensor(target))
    return case


def broadcast_add_case(rng):
    d = random_shape(rng, 'm', 'n')
    a, b = Parameter('a', rng.normal(size=(d['m'], d['n']))), Parameter('b', rng.normal(size=d['n']))
    target = rng.normal(size=(d['m'], d['n']))
    return [a, b], lambda params: ops.mse(ops.add(*params), Tensor(target))


def scale_case(rng):
    d = random_shape(rng, 'm', 'n')
    a = Parameter('a', rng.normal(size=(d['m'], d['n'])))
    factor = float(rng.normal())
    target = rng.normal(size=(d['m'], d['n']))
    return [a], lambda params: ops.mse(ops.scale(params[0], factor), Tensor(target))


def transpose_case(rng):
    d = random_shape(rng, 'm', 'n')
    a = Parameter('a', rng.normal(size=(d['m'], d['n'])))
    target = rng.normal(size=(d['n'], d['m']))
    return [a], lambda params: ops.mse(ops.transpose(params[0]), Tensor(target))


def concat_case(rng):
    d = random_shape(rng, 'm', 'k', 'n')
    a, b = Parameter('a', rng.normal(size=(d['m'], d['n']))), Parameter('b', rng.normal(size=(d['k'], d['n'])))
    target = rng.normal(size=(d['m'] + d['k'], d['n']))
    return [a, b], lambda params: ops.mse(ops.concat(params, axis=0), Tensor(target))


def slice_case(rng):
    d = random_shape(rng, 'm', 'n')
    a = Parameter('a', rng.normal(size=(d['m'], d['n'])))
    start = int(rng.integers(0, d['m']))
    stop = int(rng.integers(start + 1, d['m'] + 1))
    target = rng.normal(size=(stop - start, d['n']))
    return [a], lambda params: ops.mse(ops.slice(params[0], (np.s_[start:stop],)), Tensor(target))


def gelu_case(rng):
    d = random_shape(rng, 'm', 'n')
    a = Parameter('a', rng.normal(size=(d['m'], d['n'])))
    target = rng.normal(size=(d['m'], d['n']))
    return [a], lambda params: ops.mse(ops.gelu(params[0]), Tensor(target))


def linear_solve_case(rng):
    d = random_shape(rng, 'm', 'n')
    m = d['m']
    factor, b = Parameter('factor', rng.normal(size=(m, m))), Parameter('b', rng.normal(size=(m, d['n'])))
    target = rng.normal(size=(m, d['n']))

    def f(params):
        factor, b = params
        spd = ops.add(ops.scale(ops.matmul(factor, ops.transpose(factor)), 1.0 / m), ops.eye(m))
        return ops.mse(ops.linear_solve(ops.symmetrize(spd), b), Tensor(target))
    return [factor, b], f


def mse_case(rng):
    d = random_shape(rng, 'm', 'n')
    a, b = Parameter('a', rng.normal(size=(d['m'], d['n']))), Parameter('b', rng.normal(size=(d['m'], d['n'])))
    return [a, b], lambda params: ops.mse(*params)


RANDOMIZED_CASES = {
    'matmul': matmul_case,
    'add': elementwise_case(ops.add),
    'add_broadcast': broadcast_add_case,
    'sub': elementwise_case(ops.sub),
    'mul': elementwise_case(ops.mul),
    'scale': scale_case,
    'transpose': transpose_case,
    'concat': concat_case,
    'slice': slice_case,
    'gelu': gelu_case,
    'linear_solve': linear_solve_case,
    'mse': mse_case,
}


class RandomizedBackwardRuleTests(SimpleTestCase):
    """Every op against central differences on random shapes up to 8 x 8, one hundred seeds each."""

    SEEDS = 100

    def test_every_op_on_random_shapes(self):
        for name, case in RANDOMIZED_CASES.items():
            for seed in range(self.SEEDS):
                with self.subTest(op=name, seed=seed):
                    params, f = case(np.random.default_rng(seed))
                    # Absolute floor keeps roundoff on near-zero coordinates out of the ratio
                    self.assertLess(finite_diff_check(f, params, h=1e-5, floor=1e-3), 1e-5)


class WorkedExampleTests(SimpleTestCase):

    def test_mse_of_identical_inputs(self):
        x = Parameter('x', [1.0, -2.0, 0.5])
        loss = ops.mse(x, Tensor(x.data.copy()))
        backward(loss)
        self.assertEqual(loss.item(), 0.0)
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 0.0])

    def test_mse_gradient(self):
        x = Parameter('x', [1.0, 2.0])
        backward(ops.mse(x, Tensor([0.0, 0.0])))
        np.testing.assert_allclose(x.grad, [1.0, 2.0], rtol=1e-15)

    def test_gelu_slope_at_zero(self):
        x = Parameter('x', [0.0])
        backward(ops.sum(ops.gelu(x)))
        self.assertAlmostEqual(float(x.grad[0]), 0.5, places=15)
        self.assertAlmostEqual(ops.gelu_grad(Tensor([0.0])).data[0], 0.5, places=15)

        h = 1e-6
        numeric = (ops.gelu(Tensor([h])).item() - ops.gelu(Tensor([-h])).item()) / (2.0 * h)
        self.assertAlmostEqual(numeric, 0.5, places=8)

    def test_identity_matvec_sum(self):
        x = Parameter('x', [1.0, 1.0])
        backward(ops.sum(ops.matmul(ops.eye(2), x)))
        np.testing.assert_allclose(x.grad, [1.0, 1.0])

    def test_unused_parameter_gets_zero_gradient(self):
        used, unused = Parameter('used', [2.0]), Parameter('unused', [3.0, 4.0])
        backward(ops.sum(ops.mul(used, used)))
        np.testing.assert_allclose(used.grad, [4.0])
        np.testing.assert_array_equal(unused.grad, [0.0, 0.0])

    def test_gain_shaped_loss(self):
        rng = np.random.default_rng(3)
        K = Parameter('K', rng.normal(size=(3, 2)))
        z, y = Tensor(rng.normal(size=2)), Tensor(rng.normal(size=3))

        def f(params):
            return ops.mse(ops.matmul(params[0], z), y)

        self.assertLess(finite_diff_check(f, [K], h=1e-5), 1e-5)

    def test_quadratic_form(self):
        p = Parameter('p', [1.0, 2.0, 3.0])
        self.assertLess(finite_diff_check(lambda params: ops.sum(ops.mul(params[0], params[0])), [p]), 1e-8)
        np.testing.assert_allclose(p.grad, [2.0, 4.0, 6.0])

    def test_constant_function(self):
        p = Parameter('p', [1.0, 2.0])
        self.assertLess(finite_diff_check(lambda params: ops.sum(ops.scale(params[0], 0.0)), [p]), 1e-8)

    def test_tape_replay_is_deterministic(self):
        rng = np.random.default_rng(9)
        factor, b = Parameter('factor', rng.normal(size=(4, 4))), Parameter('b', rng.normal(size=4))
        spd = ops.add(ops.matmul(factor, ops.transpose(factor)), ops.eye(4))
        loss = ops.mse(ops.gelu(ops.linear_solve(ops.symmetrize(spd), b)), Tensor(np.ones(4)))

        backward(loss)
        first = (factor.grad.copy(), b.grad.copy())
        factor.zero_grad()
        b.zero_grad()
        backward(loss)
        np.testing.assert_array_equal(factor.grad, first[0])
        np.testing.assert_array_equal(b.grad, first[1])
