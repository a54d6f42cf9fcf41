import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from twisted.trial import unittest

from fusedesc import sparse
from fusedesc.error import (AlignmentError, ContractError, DimensionError,
                            EmptyTensorError)


def denseConv(inCoords, x, outCoords, kernel, offsets, step):
    """
    Brute force reference: output row j sums x[i] K[s] over every input
    row i sitting at outCoords[j] + offsets[s] * step
    """
    lut = {tuple(c): i for i, c in enumerate(inCoords)}
    res = np.zeros((len(outCoords), kernel.shape[2]))
    for j, c in enumerate(outCoords):
        for s, o in enumerate(offsets):
            i = lut.get(tuple(c + o * step))
            if i is not None:
                res[j] += x[i] @ kernel[s]
    return res


def randomTensor(rng, n=30, channels=2, span=4):
    coords = sparse.sortedUniqueCoords(rng.integers(-span, span, (n, 3)))
    return sparse.SparseTensor(coords,
                               rng.normal(size=(len(coords), channels)))


class CoordinateTests(unittest.TestCase):

    @settings(max_examples=40, deadline=None)
    @given(hnp.arrays(np.int64, st.tuples(st.integers(1, 20), st.just(3)),
                      elements=st.integers(-1000, 1000)))
    def test_pack_order_is_lexicographic(self, coords):
        keys = sparse.packCoords(coords)
        expected = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))
        self.assertEqual(np.argsort(keys, kind='stable').tolist(),
                         expected.tolist())

    def test_pack_out_of_range(self):
        self.assertRaises(ContractError, sparse.packCoords, [[2 ** 20, 0, 0]])

    def test_lookup(self):
        index = sparse.CoordinateIndex([[0, 0, 0], [1, 2, 3], [-1, 0, 5]])
        self.assertEqual(
            index.lookup([[1, 2, 3], [9, 9, 9], [-1, 0, 5]]).tolist(),
            [1, -1, 2])
        self.assertEqual(len(index), 3)

    def test_lookup_empty(self):
        index = sparse.CoordinateIndex(np.zeros((0, 3)))
        self.assertEqual(index.lookup([[0, 0, 0]]).tolist(), [-1])

    def test_duplicates(self):
        self.assertRaises(ContractError, sparse.CoordinateIndex,
                          [[0, 0, 0], [0, 0, 0]])

    def test_downsample(self):
        down = sparse.downsampleCoords([[1, 1, 1], [0, 0, 0], [-1, 2, 3]], 2)
        self.assertEqual(down.tolist(), [[-2, 2, 2], [0, 0, 0]])

    def test_kernel_offsets(self):
        offsets = sparse.kernelOffsets(3)
        self.assertEqual(offsets.shape, (27, 3))
        self.assertEqual(offsets[0].tolist(), [-1, -1, -1])
        self.assertEqual(offsets[13].tolist(), [0, 0, 0])
        self.assertEqual(sparse.kernelOffsets(1).tolist(), [[0, 0, 0]])
        self.assertRaises(ContractError, sparse.kernelOffsets, 2)


class SparseTensorTests(unittest.TestCase):

    def test_unsorted(self):
        self.assertRaises(ContractError, sparse.SparseTensor,
                          [[1, 0, 0], [0, 0, 0]], np.zeros((2, 1)))

    def test_not_divisible(self):
        self.assertRaises(ContractError, sparse.SparseTensor,
                          [[0, 0, 0], [1, 0, 0]], np.zeros((2, 1)), 2)

    def test_bad_stride(self):
        self.assertRaises(ContractError, sparse.SparseTensor,
                          [[0, 0, 0]], np.zeros((1, 1)), 3)

    def test_feature_rows(self):
        self.assertRaises(DimensionError, sparse.SparseTensor,
                          [[0, 0, 0]], np.zeros((2, 1)))


class VoxelizeTests(unittest.TestCase):

    def test_pooling(self):
        points = [[0.1, 0.1, 0.1], [0.3, 0.5, 0.9], [1.5, 0.0, 0.0]]
        colors = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
        t = sparse.voxelize(points, colors, 1.0)
        self.assertEqual(t.coords.tolist(), [[0, 0, 0], [1, 0, 0]])
        self.assertEqual(t.pointToVoxel.tolist(), [0, 0, 1])
        self.assertEqual([m.tolist() for m in t.originMap], [[0, 1], [2]])
        np.testing.assert_allclose(t.feats.values,
                                   [[0.5, 0.5, 0.0], [0.0, 0.0, 1.0]])
        np.testing.assert_allclose(t.centroids,
                                   [[0.2, 0.3, 0.5], [1.5, 0.0, 0.0]])

    def test_default_features(self):
        t = sparse.voxelize([[0.0, 0.0, 0.0], [-0.5, 0.0, 0.0]], None, 1.0)
        self.assertEqual(t.coords.tolist(), [[-1, 0, 0], [0, 0, 0]])
        self.assertEqual(t.feats.values.tolist(), [[1.0], [1.0]])

    def test_every_point_has_a_voxel(self):
        rng = np.random.default_rng(3)
        points = rng.uniform(-1, 1, (200, 3))
        t = sparse.voxelize(points, None, 0.25)
        coords = np.floor(points / 0.25).astype(np.int64)
        self.assertEqual(t.coords[t.pointToVoxel].tolist(), coords.tolist())
        self.assertEqual(sum(len(m) for m in t.originMap), 200)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 120), st.integers(0, 2**32 - 1))
    def test_point_order_does_not_matter(self, n, seed):
        rng = np.random.default_rng(seed)
        points = rng.uniform(-1, 1, (n, 3))
        colors = rng.uniform(0, 1, (n, 3))
        perm = rng.permutation(n)

        a = sparse.voxelize(points, colors, 0.3)
        b = sparse.voxelize(points[perm], colors[perm], 0.3)

        self.assertEqual(a.coords.tolist(), b.coords.tolist())
        np.testing.assert_allclose(b.feats.values, a.feats.values,
                                   atol=1e-12)
        np.testing.assert_allclose(b.centroids, a.centroids, atol=1e-12)
        self.assertEqual(
            [sorted(perm[m].tolist()) for m in b.originMap],
            [sorted(m.tolist()) for m in a.originMap])
        self.assertEqual(b.pointToVoxel.tolist(),
                         a.pointToVoxel[perm].tolist())

    def test_empty(self):
        self.assertRaises(EmptyTensorError, sparse.voxelize,
                          np.zeros((0, 3)))

    def test_attribute_rows(self):
        self.assertRaises(DimensionError, sparse.voxelize,
                          np.zeros((3, 3)), np.zeros((2, 3)))


class ConvolutionTests(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(11)

    def test_submanifold_matches_dense(self):
        inp = randomTensor(self.rng)
        layer = sparse.SparseConvLayer('c', 2, 3, rng=self.rng)
        out = sparse.sparseConv(inp, layer)
        self.assertEqual(out.coords.tolist(), inp.coords.tolist())
        expected = denseConv(inp.coords, inp.feats.values, inp.coords,
                             layer.kernel.values, layer.offsets, 1)
        np.testing.assert_allclose(out.feats.values, expected, atol=1e-12)

    def test_strided_matches_dense(self):
        inp = randomTensor(self.rng)
        layer = sparse.SparseConvLayer('c', 2, 3, stride=2, rng=self.rng)
        out = sparse.sparseConv(inp, layer)
        self.assertEqual(out.stride, 2)
        self.assertFalse(np.any(out.coords % 2))
        self.assertEqual(out.coords.tolist(),
                         sparse.downsampleCoords(inp.coords, 2).tolist())
        expected = denseConv(inp.coords, inp.feats.values, out.coords,
                             layer.kernel.values, layer.offsets, 1)
        np.testing.assert_allclose(out.feats.values, expected, atol=1e-12)

    def test_second_level_steps_by_stride(self):
        inp = randomTensor(self.rng, n=60, span=8)
        first = sparse.SparseConvLayer('a', 2, 2, stride=2, rng=self.rng)
        second = sparse.SparseConvLayer('b', 2, 2, stride=2, rng=self.rng)
        mid = sparse.sparseConv(inp, first)
        out = sparse.sparseConv(mid, second)
        self.assertEqual(out.stride, 4)
        expected = denseConv(mid.coords, mid.feats.values, out.coords,
                             second.kernel.values, second.offsets, 2)
        np.testing.assert_allclose(out.feats.values, expected, atol=1e-12)

    def test_kernel_map_pairs(self):
        inp = randomTensor(self.rng)
        layer = sparse.SparseConvLayer('c', 2, 3, rng=self.rng)
        kmap = sparse.buildKernelMap(inp, inp.coords, layer)
        lut = {tuple(c): i for i, c in enumerate(inp.coords)}
        expected = set()
        for j, c in enumerate(inp.coords):
            for s, o in enumerate(layer.offsets):
                i = lut.get(tuple(c + o))
                if i is not None:
                    expected.add((s, i, j))
        self.assertEqual(kmap.asSet(), expected)
        self.assertEqual(len(kmap), len(expected))

    def test_identity_kernel(self):
        inp = randomTensor(self.rng)
        layer = sparse.SparseConvLayer('c', 2, 2, kernelExtent=1)
        layer.kernel.values = np.eye(2)[None]
        out = sparse.sparseConv(inp, layer)
        self.assertEqual(out.feats.values.tolist(),
                         inp.feats.values.tolist())

    def test_bias(self):
        inp = randomTensor(self.rng)
        layer = sparse.SparseConvLayer('c', 2, 1, kernelExtent=1, bias=True)
        layer.kernel.values = np.zeros((1, 2, 1))
        layer.bias.values = np.array([2.5])
        out = sparse.sparseConv(inp, layer)
        self.assertTrue(np.all(out.feats.values == 2.5))
        self.assertEqual([p.name for p in layer.parameters()],
                         ['c.kernel', 'c.bias'])

    def test_transpose_is_adjoint(self):
        fine = randomTensor(self.rng, channels=2)
        down = sparse.SparseConvLayer('d', 2, 3, stride=2, rng=self.rng)
        up = sparse.SparseConvLayer('u', 3, 2, stride=2, transpose=True)
        up.kernel.values = down.kernel.values.transpose(0, 2, 1).copy()

        coarse = sparse.sparseConv(fine, down)
        y = self.rng.normal(size=(len(coarse), 3))
        back = sparse.sparseTransposeConv(coarse.withFeatures(y), up, fine)

        self.assertEqual(back.stride, 1)
        self.assertEqual(back.coords.tolist(), fine.coords.tolist())
        lhs = float((coarse.feats.values * y).sum())
        rhs = float((fine.feats.values * back.feats.values).sum())
        self.assertAlmostEqual(lhs, rhs, places=9)

    def test_transpose_keeps_bookkeeping(self):
        t = sparse.voxelize(self.rng.uniform(0, 3, (50, 3)), None, 0.5)
        down = sparse.SparseConvLayer('d', 1, 2, stride=2, rng=self.rng)
        up = sparse.SparseConvLayer('u', 2, 1, stride=2, transpose=True,
                                    rng=self.rng)
        back = up(down(t), t)
        self.assertIs(back.pointToVoxel, t.pointToVoxel)

    def test_transpose_from_stride1(self):
        inp = randomTensor(self.rng, channels=3)
        up = sparse.SparseConvLayer('u', 3, 2, stride=2, transpose=True)
        self.assertRaises(ContractError, sparse.sparseTransposeConv, inp, up,
                          inp.coords)

    def test_transpose_needs_target(self):
        inp = randomTensor(self.rng, channels=3)
        up = sparse.SparseConvLayer('u', 3, 2, transpose=True)
        self.assertRaises(ContractError, sparse.sparseTransposeConv, inp, up,
                          np.zeros((0, 3)))

    def test_channel_mismatch(self):
        inp = randomTensor(self.rng, channels=2)
        layer = sparse.SparseConvLayer('c', 4, 3)
        self.assertRaises(DimensionError, sparse.sparseConv, inp, layer)

    def test_skip_concat(self):
        a = randomTensor(self.rng, channels=2)
        b = a.withFeatures(np.ones((len(a), 1)))
        self.assertEqual(sparse.skipConcat(a, b).channels, 3)
        c = randomTensor(np.random.default_rng(99), channels=1)
        self.assertRaises(AlignmentError, sparse.skipConcat, a, c)

    def test_kernel_layer_interface(self):
        layer = sparse.SparseConvLayer('c', 1, 1)
        self.assertTrue(sparse.IKernelLayer.providedBy(layer))

    def test_layer_arguments(self):
        self.assertRaises(ContractError, sparse.SparseConvLayer, 'c', 0, 1)
        self.assertRaises(ContractError, sparse.SparseConvLayer, 'c', 1, 1,
                          stride=3)
