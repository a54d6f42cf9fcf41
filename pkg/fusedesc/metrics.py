"""
Evaluation measures: inlier ratio, feature match recall, transform errors
and registration success rate
"""
import numpy as np

from fusedesc.error import ContractError
from fusedesc.registration import applyTransform


class PairResult:
    """
    Evaluation outcome of one registration pair

    @ivar inlierRatio: fraction of anchors matched within tau1
    @ivar tau2: inlier ratio threshold the pair was judged with
    @ivar rte: translation error in meters, C{None} if not registered
    @ivar rre: rotation error in degrees, C{None} if not registered
    @ivar success: registration within the success thresholds
    """

    def __init__(self, inlierRatio, tau2, rte=None, rre=None, success=False):
        self.inlierRatio = float(inlierRatio)
        self.tau2 = tau2
        self.rte = rte
        self.rre = rre
        self.success = success

    @property
    def matched(self):
        return self.inlierRatio > self.tau2

    def asDict(self):
        return {
            'inlier_ratio': self.inlierRatio,
            'matched': self.matched,
            'rte_m': self.rte,
            'rre_deg': self.rre,
            'success': self.success,
        }


def inlierRatio(anchors, matches, gt, tau1, srcXYZ, dstXYZ):
    """
    Fraction of anchors whose matched target point lies within C{tau1}
    meters of the anchor moved by the ground truth transform. Anchors
    without a match count as outliers.

    @param anchors: source rows
    @type matches: L{fusedesc.registration.CorrespondenceSet}
    """
    anchors = np.asarray(anchors, dtype=np.int64).reshape(-1)
    if len(anchors) == 0:
        raise ContractError('inlierRatio needs at least one anchor')
    target = np.full(len(srcXYZ), -1, dtype=np.int64)
    target[matches.src] = matches.dst
    dst = target[anchors]
    found = dst >= 0
    if not found.any():
        return 0.0
    moved = applyTransform(np.asarray(srcXYZ)[anchors[found]], gt)
    err = np.sqrt(((np.asarray(dstXYZ)[dst[found]] - moved) ** 2).sum(axis=1))
    return float((err <= tau1).sum()) / len(anchors)


def featureMatchRecall(ratios, tau2):
    """
    Fraction of pairs whose inlier ratio is strictly above C{tau2}
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    if len(ratios) == 0:
        raise ContractError('featureMatchRecall needs at least one pair')
    return float((ratios > tau2).mean())


def fmrCurve(ratios, thresholds):
    """
    @returns: C{list} of (tau2, FMR) pairs
    """
    return [(float(t), featureMatchRecall(ratios, t)) for t in thresholds]


def sceneStd(ratios, scenes, tau2):
    """
    Standard deviation of the per-scene feature match recall

    @param scenes: scene label of every pair
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    scenes = np.asarray(scenes)
    per = [featureMatchRecall(ratios[scenes == s], tau2)
           for s in np.unique(scenes)]
    return float(np.std(per))


def transformErrors(est, gt):
    """
    @returns: (RTE in meters, RRE in degrees)
    """
    rte = float(np.linalg.norm(est.t - gt.t))
    c = (np.trace(gt.R.T @ est.R) - 1.0) / 2.0
    rre = float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))
    return rte, rre


def successRate(results, rteMax, rreMax):
    """
    Fraction of results with RTE <= C{rteMax} and RRE <= C{rreMax}
    """
    if not results:
        raise ContractError('successRate needs at least one result')
    ok = sum(
        1 for r in results
        if r.rte is not None and r.rte <= rteMax and r.rre <= rreMax
    )
    return ok / len(results)
