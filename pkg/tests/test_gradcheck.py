import json

import jsonschema
from twisted.python.filepath import FilePath
from twisted.trial import unittest

import fusedesc
from fusedesc import gradcheck
from fusedesc.dam import KernelGradientIdentityReport


class SuiteTests(unittest.TestCase):

    def setUp(self):
        self.report = gradcheck.runSuite(0)

    def test_passes(self):
        self.assertTrue(self.report.passed(), self.report.asDict())

    def test_covers_every_operation(self):
        names = [name for name, _ in self.report.checks]
        for name in ('matmul', 'rowSoftmax', 'relu', 'rowScale',
                     'rowL2Normalize', 'sparseConv.kernel',
                     'sparseConv.stride2', 'sparseTransposeConv', 'conv2d',
                     'fuse.query', 'fuse.texture', 'fuse.imageQueries',
                     'hardestContrastiveLoss'):
            self.assertIn(name, names)
        self.assertEqual(len(self.report.network), 5)

    def test_report_document(self):
        doc = json.loads(json.dumps(self.report.asDict()))
        path = FilePath(fusedesc.__file__).sibling('schemas')
        jsonschema.validate(
            doc, json.loads(path.child('gradcheck.json').getContent()))
        self.assertIsNone(doc['kernel_gradient_identity']
                          ['literal_discrepancy'])


class ReportTests(unittest.TestCase):

    def report(self, route=0.0, columnLocal=True):
        identity = KernelGradientIdentityReport(0.0, None, 0.0, columnLocal)
        return gradcheck.GradientSuiteReport(
            [('a', 1e-8), ('b', 3e-7)], [('n', 2e-6)], identity, route)

    def test_maxima(self):
        r = self.report()
        self.assertEqual(r.maxRelativeError, 3e-7)
        self.assertEqual(r.maxNetworkError, 2e-6)
        self.assertTrue(r.passed())

    def test_tolerance(self):
        self.assertFalse(self.report().passed(tolerance=1e-7))
        self.assertFalse(self.report().passed(networkTolerance=1e-6))

    def test_route_and_identity(self):
        self.assertFalse(self.report(route=1e-3).passed())
        self.assertFalse(self.report(columnLocal=False).passed())
