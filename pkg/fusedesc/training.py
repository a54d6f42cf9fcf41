"""
Hardest-contrastive metric learning for the descriptor network
"""
import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist
from twisted.python import log

from fusedesc import autodiff
from fusedesc.config import TrainConfig
from fusedesc.error import ContractError, NumericError, TrainingError
from fusedesc.registration import applyTransform


def _hardestNegatives(anchors, candidates, candidateRows, partners):
    """
    For every anchor row, the candidate row at the smallest descriptor
    distance, skipping the anchor's positive partner. Ties go to the lowest
    candidate row.
    """
    d = cdist(anchors, candidates)
    d[candidateRows[None, :] == partners[:, None]] = np.inf
    best = np.argmin(d, axis=1)
    if np.any(np.isinf(d[np.arange(len(d)), best])):
        raise ContractError('No valid negative candidates for hardest '
                            'negative mining')
    return candidateRows[best]


def _marginTerm(fA, rowsA, fB, rowsB, margin, negative):
    dist = autodiff.rowNorms(autodiff.gatherRows(fA, rowsA)
                             - autodiff.gatherRows(fB, rowsB))
    if negative:
        hinge = autodiff.relu(autodiff.add(-dist, margin))
    else:
        hinge = autodiff.relu(autodiff.sub(dist, margin))
    return autodiff.meanAll(autodiff.square(hinge))


def hardestContrastiveLoss(fieldA, fieldB, posPairs, cfg=None,
                           candidatesA=None, candidatesB=None):
    """
    Positive pairs are pulled within C{positive_margin}; for every positive
    pair the hardest negative on each side is pushed beyond
    C{negative_margin}::

        loss = mean(relu(d_pos - m_p)^2)
               + 0.5 * (mean(relu(m_n - d_negA)^2)
                        + mean(relu(m_n - d_negB)^2))

    Negatives are mined with numpy and then evaluated differentiably, so
    gradients flow through the chosen rows only.

    @param posPairs: (K, 2) array of (row in A, row in B)
    @param candidatesA: rows of A searched for negatives (default all)
    @param candidatesB: rows of B searched for negatives (default all)
    @returns: scalar L{autodiff.DenseTensor}
    """
    if cfg is None:
        cfg = TrainConfig()
    fA = getattr(fieldA, 'descriptors', fieldA)
    fB = getattr(fieldB, 'descriptors', fieldB)
    pairs = np.asarray(posPairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        raise ContractError('At least one positive pair is required')
    ia, ib = pairs[:, 0], pairs[:, 1]
    if ia.min() < 0 or ia.max() >= fA.shape[0] or \
            ib.min() < 0 or ib.max() >= fB.shape[0]:
        raise ContractError('Positive pair index out of range')

    if candidatesA is None:
        candidatesA = np.arange(fA.shape[0])
    if candidatesB is None:
        candidatesB = np.arange(fB.shape[0])
    candidatesA = np.asarray(candidatesA, dtype=np.int64)
    candidatesB = np.asarray(candidatesB, dtype=np.int64)

    negB = _hardestNegatives(fA.values[ia], fB.values[candidatesB],
                             candidatesB, ib)
    negA = _hardestNegatives(fB.values[ib], fA.values[candidatesA],
                             candidatesA, ia)

    pos = _marginTerm(fA, ia, fB, ib, cfg.positive_margin, False)
    sideA = _marginTerm(fA, ia, fB, negB, cfg.negative_margin, True)
    sideB = _marginTerm(fB, ib, fA, negA, cfg.negative_margin, True)
    return pos + autodiff.mul(sideA + sideB, 0.5)


def positivePairs(fieldA, fieldB, gt, radius, count, rng):
    """
    Samples ground truth correspondences: every voxel of A is mapped by
    C{gt} and paired with its nearest voxel of B when that voxel lies within
    C{radius}

    @returns: (K, 2) int array with K <= count, sorted by row of A
    """
    moved = applyTransform(fieldA.pointsXYZ, gt)
    dist, nearest = cKDTree(fieldB.pointsXYZ).query(moved)
    rows = np.nonzero(dist <= radius)[0]
    if len(rows) > count:
        rows = np.sort(rng.choice(rows, count, replace=False))
    return np.stack([rows, nearest[rows]], axis=1).astype(np.int64)


def _candidates(n, limit, rng):
    if n <= limit:
        return None
    return np.sort(rng.choice(n, limit, replace=False))


class TrainingReport:
    """
    @ivar epochLosses: mean loss per epoch
    @ivar stepLosses: loss of every step, in execution order
    @ivar skipped: steps skipped for lack of positive pairs
    """

    def __init__(self):
        self.epochLosses = []
        self.stepLosses = []
        self.skipped = 0

    def asCSV(self):
        lines = ['epoch,loss']
        lines.extend(f'{n},{loss!r}'
                     for n, loss in enumerate(self.epochLosses))
        return ('\n'.join(lines) + '\n').encode('utf-8')


def train(model, dataset, cfg=None):
    """
    Trains C{model} in place with SGD and momentum, one registration pair
    per step.

    @param dataset: C{list} of L{fusedesc.data.RegistrationPair}
    @rtype: L{TrainingReport}
    """
    if cfg is None:
        cfg = TrainConfig()
    if not dataset:
        raise ContractError('Training needs at least one pair')

    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    velocity = {p.name: np.zeros_like(p.values) for p in params}
    radius = 1.5 * model.config.voxel_size
    perEpoch = cfg.pairs_per_epoch or len(dataset)
    report = TrainingReport()
    step = 0

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))[:perEpoch]
        losses = []
        for idx in order:
            pair = dataset[idx]
            try:
                with autodiff.Tape():
                    fa = model.forward(pair.srcPoints, pair.srcColors,
                                       pair.srcImage).field
                    fb = model.forward(pair.dstPoints, pair.dstColors,
                                       pair.dstImage).field
                    pos = positivePairs(fa, fb, pair.gt, radius,
                                        cfg.anchors_per_pair, rng)
                    if len(pos) == 0:
                        log.msg(f'Step {step}: no positive pairs, skipped')
                        report.skipped += 1
                        step += 1
                        continue
                    loss = hardestContrastiveLoss(
                        fa, fb, pos, cfg,
                        _candidates(len(fa), cfg.negative_samples, rng),
                        _candidates(len(fb), cfg.negative_samples, rng))
                model.zeroGrad()
                autodiff.backward(loss)
            except NumericError:
                log.msg(f'Training diverged at step {step}')
                raise TrainingError(step, float('nan'))

            value = loss.item()
            for p in params:
                if not np.all(np.isfinite(p.grad)):
                    log.msg(f'Non-finite gradient for {p.name} at step {step}')
                    raise TrainingError(step, value)
                v = velocity[p.name]
                v *= cfg.momentum
                v += p.grad
                p.values = p.values - cfg.learning_rate * v

            losses.append(value)
            report.stepLosses.append(value)
            step += 1

        mean = float(np.mean(losses)) if losses else float('nan')
        report.epochLosses.append(mean)
        log.msg(f'Epoch {epoch}: loss {mean:.6f} over {len(losses)} steps')

    return report
