import json

import numpy as np
from twisted.trial import unittest

from fusedesc import autodiff
from fusedesc.config import FusionConfig
from fusedesc.error import DimensionError
from fusedesc.fusion import AttentionFusion, dumpWeights, fuse


class FusionTests(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(21)
        self.structure = autodiff.DenseTensor(self.rng.normal(size=(7, 6)))
        self.texture = autodiff.DenseTensor(self.rng.normal(size=(4, 5)))

    def block(self, **kw):
        return AttentionFusion('fusion', 6, 5, FusionConfig(**kw), self.rng)

    def test_default_width(self):
        self.assertEqual(self.block().width, 3)
        self.assertEqual(self.block(c_t=8).width, 8)
        self.assertEqual(AttentionFusion('f', 1, 5).width, 1)

    def test_weights_are_distributions(self):
        res = fuse(self.block(), self.structure, self.texture)
        w = res.weights.values
        self.assertEqual(w.shape, (7, 4))
        np.testing.assert_allclose(w.sum(axis=1), 1.0, rtol=1e-12)
        self.assertTrue(np.all(w > 0))

    def test_fused_is_structure_plus_texture(self):
        res = fuse(self.block(), self.structure, self.texture)
        self.assertEqual(
            res.fused.values.tolist(),
            (self.structure.values + res.texture.values).tolist())
        self.assertIs(res.output, res.fused)

    def test_single_cell(self):
        block = self.block()
        one = autodiff.DenseTensor(self.texture.values[:1])
        res = fuse(block, self.structure, one)
        self.assertTrue(np.all(res.weights.values == 1.0))
        t = res.texture.values
        np.testing.assert_allclose(t, np.repeat(t[:1], 7, axis=0))

    def test_image_queries(self):
        block = self.block(query_source='image')
        self.assertEqual(block.query.shape, (5, 3))
        self.assertEqual(block.key.shape, (6, 3))
        res = fuse(block, self.structure, self.texture)
        w = res.weights.values
        self.assertEqual(w.shape, (7, 4))
        np.testing.assert_allclose(w.sum(axis=1), 1.0, rtol=1e-12)

    def test_image_row_order_does_not_matter(self):
        for source in ('points', 'image'):
            block = self.block(query_source=source)
            perm = self.rng.permutation(len(self.texture.values))
            shuffled = autodiff.DenseTensor(self.texture.values[perm])
            a = fuse(block, self.structure, self.texture)
            b = fuse(block, self.structure, shuffled)
            np.testing.assert_allclose(b.fused.values, a.fused.values,
                                       rtol=1e-12, atol=1e-12)
            np.testing.assert_allclose(b.weights.values,
                                       a.weights.values[:, perm],
                                       rtol=1e-12, atol=1e-12)

    def test_unattended_point_keeps_structure(self):
        block = self.block(query_source='image')
        block.query.values[:] = 0.01
        block.key.values[:] = 1.0
        structure = self.structure.values.copy()
        structure[0] = -1e4
        texture = np.abs(self.texture.values) + 1.0
        res = fuse(block, autodiff.DenseTensor(structure),
                   autodiff.DenseTensor(texture))
        self.assertEqual(res.weights.values[0].tolist(), [0.0] * 4)
        np.testing.assert_allclose(res.fused.values[0], structure[0])
        np.testing.assert_allclose(res.weights.values[1:].sum(axis=1), 1.0,
                                   rtol=1e-12)

    def test_self_attention(self):
        block = self.block(self_attention_layers=2)
        names = [p.name for p in block.parameters()]
        self.assertIn('fusion.sa1.query', names)
        self.assertIn('fusion.sa2.out_bias', names)
        res = fuse(block, self.structure, self.texture)
        self.assertEqual(res.output.shape, (7, 6))
        self.assertFalse(np.allclose(res.output.values, res.fused.values))

    def test_shape_checks(self):
        block = self.block()
        self.assertRaises(DimensionError, fuse, block, self.texture,
                          self.texture)
        self.assertRaises(DimensionError, fuse, block, self.structure,
                          self.structure)

    def test_projection_gradients(self):
        block = self.block(self_attention_layers=1)
        for param in (block.key, block.value, block.out):
            report = autodiff.finiteDiffCheck(
                lambda x: fuse(block, self.structure, self.texture).output,
                param)
            self.assertLess(report.maxRelativeError, 1e-6, param.name)


class DumpTests(unittest.TestCase):

    weights = np.array([[0.25, 0.75], [1.0, 0.0], [0.5, 0.5]])

    def test_json(self):
        doc = json.loads(dumpWeights(self.weights, 'json'))
        self.assertEqual((doc['rows'], doc['cols']), (3, 2))
        self.assertEqual(doc['weights'], self.weights.tolist())

    def test_csv(self):
        lines = dumpWeights(self.weights, 'csv').decode('utf-8').splitlines()
        self.assertEqual(lines[0], 'point,cell0,cell1')
        self.assertEqual(lines[1], '0,0.25,0.75')
        self.assertEqual(len(lines), 4)

    def test_unknown_format(self):
        self.assertRaises(ValueError, dumpWeights, self.weights, 'xml')
