import threading

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from twisted.trial import unittest

from fusedesc import autodiff as ad
from fusedesc.error import ContractError, DimensionError, NumericError


finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


class TapeTests(unittest.TestCase):

    def test_matmul_gradients(self):
        a = ad.Parameter('a', [[1.0, 2.0], [3.0, 4.0]])
        b = ad.Parameter('b', [[1.0], [-1.0]])
        with ad.Tape():
            loss = ad.sumAll(ad.matmul(a, b))
        ad.backward(loss)
        self.assertEqual(loss.item(), -2.0)
        self.assertEqual(a.grad.tolist(), [[1.0, -1.0], [1.0, -1.0]])
        self.assertEqual(b.grad.tolist(), [[4.0], [6.0]])

    def test_shared_input_visited_once(self):
        a = ad.Parameter('a', [3.0])
        with ad.Tape() as tape:
            loss = ad.sumAll(ad.add(ad.mul(a, a), a))
        ad.backward(loss)
        self.assertEqual(a.grad.tolist(), [7.0])
        self.assertEqual(len(tape), 3)

    def test_parameter_gradients_accumulate(self):
        a = ad.Parameter('a', [2.0])
        for _ in range(2):
            with ad.Tape():
                loss = ad.sumAll(ad.square(a))
            ad.backward(loss)
        self.assertEqual(a.grad.tolist(), [8.0])
        a.zeroGrad()
        self.assertEqual(a.grad.tolist(), [0.0])

    def test_operator_overloads(self):
        a = ad.Parameter('a', [1.0, 2.0])
        with ad.Tape():
            loss = ad.sumAll(2.0 * a - 1.0 + a)
        ad.backward(loss)
        self.assertEqual(loss.item(), 7.0)
        self.assertEqual(a.grad.tolist(), [3.0, 3.0])

    def test_untracked_not_recorded(self):
        with ad.Tape() as tape:
            ad.matmul(ad.DenseTensor(np.eye(2)), ad.DenseTensor(np.eye(2)))
        self.assertEqual(len(tape), 0)

    def test_no_grad(self):
        a = ad.Parameter('a', [1.0])
        with ad.Tape() as tape:
            with ad.noGrad():
                ad.square(a)
        self.assertEqual(len(tape), 0)

    def test_backward_requires_scalar(self):
        a = ad.Parameter('a', [1.0, 2.0])
        with ad.Tape():
            y = ad.square(a)
        self.assertRaises(ContractError, ad.backward, y)

    def test_backward_requires_tape(self):
        self.assertRaises(ContractError, ad.backward,
                          ad.DenseTensor(np.array(1.0)))

    def test_propagate_foreign_tensor(self):
        a = ad.Parameter('a', [1.0])
        with ad.Tape():
            y = ad.square(a)
        with ad.Tape() as other:
            pass
        self.assertRaises(ContractError, other.propagate, y, [1.0])

    def test_tape_is_thread_local(self):
        seen = []

        def record():
            seen.append(ad.currentTape())

        with ad.Tape() as tape:
            self.assertIs(ad.currentTape(), tape)
            t = threading.Thread(target=record)
            t.start()
            t.join()
        self.assertEqual(seen, [None])
        self.assertIsNone(ad.currentTape())


class ValidationTests(unittest.TestCase):

    def test_non_finite(self):
        self.assertRaises(NumericError, ad.DenseTensor, [1.0, np.nan])

    def test_dimension_message(self):
        e = self.assertRaises(DimensionError, ad.matmul,
                              ad.DenseTensor(np.zeros((2, 3))),
                              ad.DenseTensor(np.zeros((2, 3))))
        self.assertIn('(2, 3)', str(e))
        self.assertEqual(e.shapes, ((2, 3), (2, 3)))

    def test_softmax_scale(self):
        self.assertRaises(ContractError, ad.rowSoftmax,
                          ad.DenseTensor(np.zeros((1, 2))), 0.0)

    def test_row_sum_normalize_positive(self):
        self.assertRaises(NumericError, ad.rowSumNormalize,
                          ad.DenseTensor([[1.0, -1.0]]))

    def test_row_sum_normalize_floor(self):
        y = ad.rowSumNormalize(ad.DenseTensor([[0.0, 0.0], [1.0, 3.0]]),
                               1e-12)
        self.assertEqual(y.values.tolist(), [[0.0, 0.0], [0.25, 0.75]])

    def test_zero_row_normalize(self):
        a = ad.Parameter('a', np.zeros((2, 3)))
        with ad.Tape():
            y = ad.rowL2Normalize(a)
            loss = ad.sumAll(y)
        ad.backward(loss)
        self.assertEqual(y.values.tolist(), np.zeros((2, 3)).tolist())
        self.assertTrue(np.all(np.isfinite(a.grad)))

    def test_mean_all_empty(self):
        self.assertRaises(ContractError, ad.meanAll,
                          ad.DenseTensor(np.zeros((0, 2))))

    @settings(max_examples=30, deadline=None)
    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5),
                                            st.integers(1, 5)),
                      elements=finite))
    def test_softmax_rows_sum_to_one(self, values):
        s = ad.rowSoftmax(ad.DenseTensor(values), 0.5).values
        np.testing.assert_allclose(s.sum(axis=1), 1.0, rtol=1e-12)
        self.assertTrue(np.all(s >= 0))

    @settings(max_examples=30, deadline=None)
    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5),
                                            st.integers(1, 5)),
                      elements=finite))
    def test_normalized_rows(self, values):
        y = ad.rowL2Normalize(ad.DenseTensor(values)).values
        norms = np.linalg.norm(y, axis=1)
        live = np.linalg.norm(values, axis=1) > 1e-6
        np.testing.assert_allclose(norms[live], 1.0, rtol=1e-9)


class FiniteDifferenceTests(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(7)

    def check(self, f, x, tolerance=1e-6):
        report = ad.finiteDiffCheck(f, x)
        self.assertLess(report.maxRelativeError, tolerance, repr(report))

    def tensor(self, *shape):
        return ad.DenseTensor(self.rng.normal(size=shape))

    def test_row_softmax(self):
        self.check(lambda x: ad.rowSoftmax(x, 2.0), self.tensor(3, 4))

    def test_linear_bias(self):
        a = self.tensor(5, 3)
        w = self.tensor(3, 2)
        self.check(lambda b: ad.linear(a, w, b), self.tensor(2))

    def test_row_scale(self):
        gain = ad.Parameter('g', self.rng.uniform(0.5, 2.0, 4))
        bias = ad.Parameter('b', self.rng.normal(size=4))
        self.check(lambda x: ad.rowScale(x, gain, bias), self.tensor(3, 4))
        x = self.tensor(3, 4)
        self.check(lambda g: ad.rowScale(x, g, bias), gain)

    def test_row_l2_normalize(self):
        self.check(ad.rowL2Normalize, self.tensor(4, 3))

    def test_row_sum_normalize(self):
        x = ad.DenseTensor(self.rng.uniform(0.5, 2.0, (3, 4)))
        self.check(ad.rowSumNormalize, x)

    def test_row_sum_normalize_floored(self):
        x = np.vstack([self.rng.uniform(0.5, 2.0, 4),
                       self.rng.uniform(0.01, 0.02, 4)])
        self.check(lambda t: ad.rowSumNormalize(t, 1.0), ad.DenseTensor(x))

    def test_row_norms(self):
        self.check(ad.rowNorms, self.tensor(4, 3))

    def test_gather_rows_repeated(self):
        self.check(lambda x: ad.gatherRows(x, [0, 2, 2, 1]),
                   self.tensor(3, 2))

    def test_concat_transpose_reshape(self):
        b = self.tensor(3, 2)
        self.check(
            lambda x: ad.reshape(ad.transpose(ad.concatColumns(x, b)), (15,)),
            self.tensor(3, 3))

    def test_select_element(self):
        self.check(lambda x: ad.square(ad.selectElement(x, (1, 0))),
                   self.tensor(2, 2))

    def test_leaves_parameter_untouched(self):
        p = ad.Parameter('p', [1.0, 2.0])
        p.grad[:] = 5.0
        ad.finiteDiffCheck(ad.square, p)
        self.assertEqual(p.grad.tolist(), [5.0, 5.0])
        self.assertEqual(p.values.tolist(), [1.0, 2.0])
