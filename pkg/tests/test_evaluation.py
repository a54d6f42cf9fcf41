import json

import jsonschema
import numpy as np
from twisted.internet import defer, reactor
from twisted.python.filepath import FilePath
from twisted.trial import unittest

import fusedesc
from fusedesc import evaluation, network
from fusedesc.config import MetricConfig, RansacConfig
from fusedesc.data import RegistrationPair
from fusedesc.gradcheck import microNetworkConfig
from fusedesc.image import Image
from fusedesc.registration import RigidTransform, applyTransform


def schema(name):
    path = FilePath(fusedesc.__file__).sibling('schemas').child(name)
    return json.loads(path.getContent())


def row(ratio, scene, tag, rte, rre, byTau1, byCount, byIterations):
    return {
        'inlier_ratio': ratio, 'matched': ratio > 0.05, 'rte_m': rte,
        'rre_deg': rre, 'success': False, 'index': 0, 'scene': scene,
        'tag': tag, 'overlap': 0.5, 'anchors': 8, 'by_tau1': byTau1,
        'by_anchor_count': byCount, 'by_iterations': byIterations,
        'transform': {'R': [1, 0, 0, 0, 1, 0, 0, 0, 1], 't': [0, 0, 0],
                      'success': rte is not None},
    }


class SummaryTests(unittest.TestCase):

    metricCfg = MetricConfig(tau1_curve=[0.05, 0.1], sampling_sweep=[8, 4],
                             tau2_curve=[0.0, 0.4])
    ransacCfg = RansacConfig(iteration_sweep=[10, 100])

    def setUp(self):
        self.rows = [
            row(0.5, 0, 'standard', 0.1, 1.0, [0.01, 0.5], [0.5, 0.6],
                [False, True]),
            row(0.02, 0, 'standard', None, None, [0.0, 0.02], [0.02, 0.0],
                [False, False]),
            row(0.3, 1, 'low_overlap', 3.0, 2.0, [0.2, 0.3], [0.3, 0.3],
                [True, True]),
        ]
        self.report = evaluation.summarize(self.rows, self.metricCfg,
                                           self.ransacCfg)

    def test_recall(self):
        r = self.report
        self.assertEqual(r['fmr'], 2 / 3)
        self.assertEqual(r['fmr_standard'], 0.5)
        self.assertEqual(r['fmr_low_overlap'], 1.0)
        self.assertAlmostEqual(r['fmr_std'], 0.25)

    def test_sweeps(self):
        r = self.report
        self.assertEqual(r['fmr_vs_tau1'], [(0.05, 1 / 3), (0.1, 2 / 3)])
        self.assertEqual(r['sampling_sweep'], [(8, 2 / 3), (4, 2 / 3)])
        self.assertEqual(r['iteration_sweep'], [(10, 1 / 3), (100, 2 / 3)])
        self.assertEqual(r['fmr_vs_tau2'], [(0.0, 1.0), (0.4, 1 / 3)])

    def test_registration(self):
        r = self.report
        self.assertEqual(r['success_rate'], 1 / 3)
        self.assertAlmostEqual(r['rte_mean'], 1.55)
        self.assertAlmostEqual(r['rre_mean'], 1.5)

    def test_missing_split(self):
        report = evaluation.summarize(self.rows[:2], self.metricCfg,
                                      self.ransacCfg)
        self.assertIsNone(report['fmr_low_overlap'])

    def test_schema(self):
        doc = json.loads(json.dumps(self.report))
        jsonschema.validate(doc, schema('metrics.json'))

    def test_curves(self):
        self.assertEqual(evaluation.curvesCSV(self.report).decode('utf-8'), (
            'curve,threshold,fmr\n'
            'tau2,0.0,1.0\n'
            'tau2,0.4,0.3333333333333333\n'
            'tau1,0.05,0.3333333333333333\n'
            'tau1,0.1,0.6666666666666666\n'))


def fragmentPair(seed, scene=0, tag='standard'):
    rng = np.random.default_rng(seed)
    points = rng.uniform(0.0, 4.0, (60, 3))
    colors = rng.uniform(0.0, 1.0, (60, 3))
    gt = RigidTransform(np.eye(3), (1.0, 0.0, 2.0))
    image = Image(rng.uniform(size=(16, 16, 3)))
    return RegistrationPair(points, colors, image,
                            applyTransform(points, gt), colors, image, gt,
                            1.0, scene, tag)


class EvaluateTests(unittest.TestCase):

    metricCfg = MetricConfig(anchors=16, sampling_sweep=[16, 8])
    ransacCfg = RansacConfig(iterations=50, batch_size=25,
                             iteration_sweep=[10])

    def setUp(self):
        self.model = network.build(microNetworkConfig(), seed=2)
        self.pairs = [fragmentPair(0), fragmentPair(1, 1)]

    def test_anchors(self):
        pair = self.pairs[0]
        src = network.extractDescriptors(self.model, pair.srcPoints,
                                         pair.srcColors, pair.srcImage)
        dst = network.extractDescriptors(self.model, pair.dstPoints,
                                         pair.dstColors, pair.dstImage)
        anchors = evaluation.overlapAnchors(src, dst, pair.gt, 1.5)
        self.assertEqual(anchors.tolist(), list(range(len(src))))

    def test_pair(self):
        row, seconds = evaluation.evaluatePair(
            self.model, self.pairs[0], 0, self.metricCfg, self.ransacCfg)
        self.assertEqual(row['index'], 0)
        self.assertEqual(len(row['by_tau1']), 10)
        self.assertEqual(len(row['by_anchor_count']), 2)
        self.assertEqual(len(row['by_iterations']), 1)
        self.assertGreaterEqual(seconds, 0.0)

    def test_report(self):
        d = evaluation.evaluate(reactor, self.model, self.pairs,
                                self.metricCfg, self.ransacCfg, 2)

        def check(result):
            report, seconds = result
            self.assertEqual([r['index'] for r in report['pairs']], [0, 1])
            self.assertEqual([r['scene'] for r in report['pairs']], [0, 1])
            self.assertIsNone(report['fmr_low_overlap'])
            jsonschema.validate(json.loads(json.dumps(report)),
                                schema('metrics.json'))
            self.assertGreater(seconds, 0.0)

        return d.addCallback(check)

    @defer.inlineCallbacks
    def test_thread_count_does_not_change_results(self):
        one, _ = yield evaluation.evaluate(reactor, self.model, self.pairs,
                                           self.metricCfg, self.ransacCfg, 1)
        two, _ = yield evaluation.evaluate(reactor, self.model, self.pairs,
                                           self.metricCfg, self.ransacCfg, 2)
        self.assertEqual(one, two)

    def test_heat_map_contrast(self):
        same, other = evaluation.heatMapContrast(
            self.model, self.pairs, 2, np.random.default_rng(0))
        for value in (same, other):
            self.assertGreaterEqual(value, 0.0)
            self.assertLessEqual(value, 1.0 + 1e-12)
        again = evaluation.heatMapContrast(
            self.model, self.pairs, 2, np.random.default_rng(0))
        self.assertEqual((same, other), again)

    def test_heat_map_contrast_without_overlap(self):
        pair = self.pairs[0]
        apart = RegistrationPair(
            pair.srcPoints, pair.srcColors, pair.srcImage,
            pair.dstPoints + 100.0, pair.dstColors, pair.dstImage, pair.gt,
            0.0)
        same, other = evaluation.heatMapContrast(
            self.model, [apart], 1, np.random.default_rng(0))
        self.assertTrue(np.isnan(same) and np.isnan(other))
