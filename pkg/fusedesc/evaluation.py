"""
Dataset evaluation: feature match recall tables, threshold curves and
registration accuracy. Pairs are evaluated concurrently on a thread pool;
results are always reported in pair order.
"""
import csv
import io
import time

import numpy as np
from scipy.spatial import cKDTree
from twisted.internet import defer, threads
from twisted.python import log
from twisted.python.threadpool import ThreadPool

from fusedesc import dam, metrics
from fusedesc.config import MetricConfig, RansacConfig
from fusedesc.network import extractDescriptors
from fusedesc.registration import (applyTransform, matchDescriptors,
                                   ransacRegister)


def overlapAnchors(src, dst, gt, radius):
    """
    Source voxels whose ground truth position has a target voxel within
    C{radius}
    """
    dist, _ = cKDTree(dst.pointsXYZ).query(applyTransform(src.pointsXYZ, gt))
    return np.nonzero(dist <= radius)[0]


def _seed(seed, index):
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def evaluatePair(model, pair, index, metricCfg=None, ransacCfg=None):
    """
    @returns: (row C{dict} for the report, extraction seconds)
    """
    if metricCfg is None:
        metricCfg = MetricConfig()
    if ransacCfg is None:
        ransacCfg = RansacConfig()

    started = time.perf_counter()
    src = extractDescriptors(model, pair.srcPoints, pair.srcColors,
                             pair.srcImage)
    dst = extractDescriptors(model, pair.dstPoints, pair.dstColors,
                             pair.dstImage)
    elapsed = (time.perf_counter() - started) / 2

    rng = np.random.default_rng([ransacCfg.seed, index])
    anchors = overlapAnchors(src, dst, pair.gt,
                             1.5 * model.config.voxel_size)
    anchors = rng.permutation(anchors)
    matches = matchDescriptors(src, dst, metricCfg.mutual_only)

    def ratio(n, tau1):
        chosen = anchors[:n]
        if len(chosen) == 0:
            return 0.0
        return metrics.inlierRatio(chosen, matches, pair.gt, tau1,
                                   src.pointsXYZ, dst.pointsXYZ)

    main = ratio(metricCfg.anchors, metricCfg.tau1)

    corrs = matchDescriptors(src, dst, ransacCfg.mutual_only)
    params = ransacCfg.replace(seed=_seed(ransacCfg.seed, index))
    reg = ransacRegister(corrs, src.pointsXYZ, dst.pointsXYZ, params)
    rte = rre = None
    if reg.success:
        rte, rre = metrics.transformErrors(reg.transform, pair.gt)
    success = rte is not None and rte <= metricCfg.rte_max \
        and rre <= metricCfg.rre_max
    result = metrics.PairResult(main, metricCfg.tau2, rte, rre, success)

    row = result.asDict()
    row.update({
        'index': index,
        'scene': int(pair.scene),
        'tag': pair.tag,
        'overlap': float(pair.overlap),
        'anchors': int(min(len(anchors), metricCfg.anchors)),
        'by_tau1': [ratio(metricCfg.anchors, t)
                    for t in metricCfg.tau1_curve],
        'by_anchor_count': [ratio(n, metricCfg.tau1)
                            for n in metricCfg.sampling_sweep],
        'transform': reg.asDict(),
    })

    sweep = []
    for budget in ransacCfg.iteration_sweep:
        r = ransacRegister(corrs, src.pointsXYZ, dst.pointsXYZ,
                           params.replace(iterations=budget))
        ok = False
        if r.success:
            e, a = metrics.transformErrors(r.transform, pair.gt)
            ok = e <= metricCfg.rte_max and a <= metricCfg.rre_max
        sweep.append(ok)
    row['by_iterations'] = sweep
    return row, elapsed


def _fmrOrNone(ratios, tau2):
    if not ratios:
        return None
    return metrics.featureMatchRecall(ratios, tau2)


def summarize(rows, metricCfg=None, ransacCfg=None):
    """
    Aggregates per pair rows into the metrics report
    """
    if metricCfg is None:
        metricCfg = MetricConfig()
    if ransacCfg is None:
        ransacCfg = RansacConfig()
    tau2 = metricCfg.tau2
    ratios = [r['inlier_ratio'] for r in rows]
    results = [metrics.PairResult(r['inlier_ratio'], tau2, r['rte_m'],
                                  r['rre_deg'], r['success']) for r in rows]
    registered = [r for r in results if r.rte is not None]

    def split(tag):
        return _fmrOrNone(
            [r['inlier_ratio'] for r in rows if r['tag'] == tag], tau2)

    return {
        'pairs': rows,
        'tau1': metricCfg.tau1,
        'tau2': tau2,
        'fmr': metrics.featureMatchRecall(ratios, tau2),
        'fmr_std': metrics.sceneStd(ratios, [r['scene'] for r in rows],
                                    tau2),
        'fmr_standard': split('standard'),
        'fmr_low_overlap': split('low_overlap'),
        'fmr_vs_tau2': metrics.fmrCurve(ratios, metricCfg.tau2_curve),
        'fmr_vs_tau1': [
            (float(t), metrics.featureMatchRecall(
                [r['by_tau1'][k] for r in rows], tau2))
            for k, t in enumerate(metricCfg.tau1_curve)
        ],
        'sampling_sweep': [
            (int(n), metrics.featureMatchRecall(
                [r['by_anchor_count'][k] for r in rows], tau2))
            for k, n in enumerate(metricCfg.sampling_sweep)
        ],
        'iteration_sweep': [
            (int(n), float(np.mean([r['by_iterations'][k] for r in rows])))
            for k, n in enumerate(ransacCfg.iteration_sweep)
        ],
        'success_rate': metrics.successRate(results, metricCfg.rte_max,
                                            metricCfg.rre_max),
        'rte_mean': float(np.mean([r.rte for r in registered]))
        if registered else None,
        'rre_mean': float(np.mean([r.rre for r in registered]))
        if registered else None,
    }


def curvesCSV(report):
    """
    FMR against both thresholds, one row per threshold value
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(['curve', 'threshold', 'fmr'])
    for t, f in report['fmr_vs_tau2']:
        writer.writerow(['tau2', repr(t), repr(f)])
    for t, f in report['fmr_vs_tau1']:
        writer.writerow(['tau1', repr(t), repr(f)])
    return buf.getvalue().encode('utf-8')


def evaluate(reactor, model, pairs, metricCfg=None, ransacCfg=None,
             threadCount=1):
    """
    Evaluates every pair on a pool of C{threadCount} threads

    @returns: L{defer.Deferred} firing with (report C{dict}, mean
              extraction seconds)
    """
    pool = ThreadPool(minthreads=1, maxthreads=threadCount,
                      name='fusedesc-evaluate')
    pool.start()

    ds = [
        threads.deferToThreadPool(reactor, pool, evaluatePair, model, pair,
                                  n, metricCfg, ransacCfg)
        for n, pair in enumerate(pairs)
    ]
    d = defer.gatherResults(ds, consumeErrors=True)

    def done(outcomes):
        rows = [row for row, _ in outcomes]
        timing = float(np.mean([t for _, t in outcomes]))
        log.msg(f'Evaluated {len(rows)} pairs on {threadCount} threads')
        return summarize(rows, metricCfg, ransacCfg), timing

    def stop(result):
        pool.stop()
        return result

    d.addCallback(done)
    d.addBoth(stop)
    return d


def heatMapContrast(model, pairs, count, rng):
    """
    Compares heat maps of matched and unmatched points.

    For each of the first C{count} pairs one overlapping source point is
    drawn. Its heat map is compared with that of the nearest target point
    under the ground truth and with that of a random target point, using
    L{dam.heatMapSimilarity} over points aligned within three voxels.

    @returns: (mean matched similarity, mean unmatched similarity); both
              C{nan} when no pair has an overlapping point
    """
    voxel = model.config.voxel_size
    matched, unmatched = [], []
    for pair in pairs[:count]:
        src = extractDescriptors(model, pair.srcPoints, pair.srcColors,
                                 pair.srcImage)
        dst = extractDescriptors(model, pair.dstPoints, pair.dstColors,
                                 pair.dstImage)
        anchors = overlapAnchors(src, dst, pair.gt, 1.5 * voxel)
        if len(anchors) == 0:
            continue
        i = int(src.pointMap[int(rng.choice(anchors))][0])
        moved = applyTransform(pair.srcPoints[i], pair.gt)
        near = np.linalg.norm(pair.dstPoints - moved, axis=1).argmin()
        far = rng.integers(len(pair.dstPoints))

        a = dam.descriptorActivationMap(model, pair.srcPoints,
                                        pair.srcColors, pair.srcImage, i)
        for k, into in ((near, matched), (far, unmatched)):
            b = dam.descriptorActivationMap(model, pair.dstPoints,
                                            pair.dstColors, pair.dstImage,
                                            int(k))
            into.append(dam.heatMapSimilarity(a, pair.srcPoints, b,
                                              pair.dstPoints, pair.gt,
                                              3 * voxel))
    if not matched:
        return float('nan'), float('nan')
    return float(np.mean(matched)), float(np.mean(unmatched))
