"""
Descriptor matching and rigid registration
"""
import numpy as np
from scipy.spatial import cKDTree
from twisted.python import log

from fusedesc.config import RansacConfig
from fusedesc.error import (ContractError, DegenerateError, DimensionError,
                            EmptyTensorError)


class RigidTransform:
    """
    x -> R x + t

    @ivar R: (3, 3) rotation matrix
    @ivar t: (3,) translation in meters
    """

    def __init__(self, R, t):
        R = np.array(R, dtype=np.float64).reshape(3, 3)
        t = np.array(t, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or \
                abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ContractError('R is not a proper rotation')
        self.R = R
        self.t = t

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def fromMatrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def inverse(self):
        return RigidTransform(self.R.T, -self.R.T @ self.t)

    def compose(self, other):
        """
        Transform applying C{other} first and then C{self}
        """
        return RigidTransform(self.R @ other.R, self.R @ other.t + self.t)

    def asDict(self):
        return {
            'R': [float(x) for x in self.R.reshape(-1)],
            't': [float(x) for x in self.t],
        }

    @classmethod
    def fromDict(cls, d):
        return cls(np.array(d['R']).reshape(3, 3), d['t'])

    def __repr__(self):
        return f'RigidTransform(R={self.R.tolist()}, t={self.t.tolist()})'


def applyTransform(points, T):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return points @ T.R.T + T.t


class CorrespondenceSet:
    """
    @ivar src: source rows
    @ivar dst: matched target rows
    @ivar distance: descriptor distances
    @ivar mutual: True where the match is mutually nearest
    """

    def __init__(self, src, dst, distance=None, mutual=None):
        self.src = np.asarray(src, dtype=np.int64).reshape(-1)
        self.dst = np.asarray(dst, dtype=np.int64).reshape(-1)
        n = len(self.src)
        if len(self.dst) != n:
            raise DimensionError('CorrespondenceSet', self.src.shape,
                                 self.dst.shape)
        self.distance = np.zeros(n) if distance is None else \
            np.asarray(distance, dtype=np.float64)
        self.mutual = np.zeros(n, dtype=bool) if mutual is None else \
            np.asarray(mutual, dtype=bool)

    def __len__(self):
        return len(self.src)

    @property
    def pairs(self):
        return list(zip(self.src.tolist(), self.dst.tolist(),
                        self.distance.tolist()))

    def select(self, mask):
        return CorrespondenceSet(self.src[mask], self.dst[mask],
                                 self.distance[mask], self.mutual[mask])


def nearestNeighbors(query, ref):
    """
    Exact Euclidean nearest neighbor of every query row among C{ref} rows.
    Equidistant candidates resolve to the lowest row index.

    @returns: (indices, distances)
    """
    query = np.asarray(query, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    tree = cKDTree(ref)
    d, idx = tree.query(query, k=1)
    idx = np.asarray(idx, dtype=np.int64)
    balls = tree.query_ball_point(query, d * (1 + 1e-9) + 1e-12)
    for i, cand in enumerate(balls):
        if len(cand) > 1:
            cand = np.asarray(cand, dtype=np.int64)
            exact = np.sqrt(((ref[cand] - query[i]) ** 2).sum(axis=1))
            idx[i] = cand[exact == exact.min()].min()
    dist = np.sqrt(((ref[idx] - query) ** 2).sum(axis=1))
    return idx, dist


def matchDescriptors(a, b, mutualOnly=False):
    """
    Matches every descriptor of C{a} to its nearest descriptor in C{b}

    @type a: L{fusedesc.network.DescriptorField} or (M, C) array
    @rtype: L{CorrespondenceSet}
    """
    fa = np.asarray(getattr(a, 'values', a), dtype=np.float64)
    fb = np.asarray(getattr(b, 'values', b), dtype=np.float64)
    if len(fa) == 0 or len(fb) == 0:
        raise EmptyTensorError('Cannot match empty descriptor sets')
    if fa.shape[1] != fb.shape[1]:
        raise DimensionError('matchDescriptors', fa.shape, fb.shape)

    fwd, dist = nearestNeighbors(fa, fb)
    back, _ = nearestNeighbors(fb, fa)
    src = np.arange(len(fa))
    mutual = back[fwd] == src
    corrs = CorrespondenceSet(src, fwd, dist, mutual)
    if mutualOnly:
        corrs = corrs.select(mutual)
    return corrs


def _sampleBatch(rng, n, k, s):
    """
    Draws C{n} hypotheses of C{s} distinct indices below C{k}
    """
    return rng.random((n, k)).argpartition(s - 1, axis=1)[:, :s]


def _fitBatch(P, Q):
    """
    Batched least-squares rigid fit of (n, k, 3) point sets

    @returns: (R, t, degenerate mask)
    """
    cp = P.mean(axis=1, keepdims=True)
    cq = Q.mean(axis=1, keepdims=True)
    H = np.einsum('nki,nkj->nij', P - cp, Q - cq)
    U, S, Vt = np.linalg.svd(H)
    degenerate = S[:, 1] <= 1e-10 * np.maximum(S[:, 0], 1e-300)
    V = np.swapaxes(Vt, 1, 2)
    Ut = np.swapaxes(U, 1, 2)
    sign = np.sign(np.linalg.det(V @ Ut))
    sign[sign == 0] = 1.0
    D = np.zeros_like(H)
    D[:, 0, 0] = 1.0
    D[:, 1, 1] = 1.0
    D[:, 2, 2] = sign
    R = V @ D @ Ut
    t = cq[:, 0, :] - np.einsum('nij,nj->ni', R, cp[:, 0, :])
    return R, t, degenerate


def kabsch(src, dst, weights=None):
    """
    Least-squares rigid transform mapping C{src} onto C{dst}, minimizing
    sum w |R src + t - dst|^2. The determinant correction guarantees a
    proper rotation.

    @rtype: L{RigidTransform}
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise DimensionError('kabsch', src.shape, dst.shape)
    if len(src) < 3:
        raise DegenerateError('Rigid fit needs at least 3 point pairs')
    if weights is None:
        w = np.ones(len(src))
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        if len(w) != len(src) or np.any(w < 0) or w.sum() <= 0:
            raise ContractError('Weights must be nonnegative, one per pair')
    cs = w @ src / w.sum()
    cd = w @ dst / w.sum()
    H = ((src - cs) * w[:, None]).T @ (dst - cd)
    U, S, Vt = np.linalg.svd(H)
    if S[1] <= 1e-10 * max(S[0], 1e-300):
        raise DegenerateError('Point sets are rank deficient')
    sign = 1.0 if np.linalg.det(Vt.T @ U.T) >= 0 else -1.0
    R = Vt.T @ np.diag([1.0, 1.0, sign]) @ U.T
    return RigidTransform(R, cd - R @ cs)


class RegistrationResult:
    """
    @ivar transform: estimated L{RigidTransform}, identity on failure
    @ivar inliers: (K, 2) inlier correspondences (source row, target row),
                   sorted
    @ivar iterations: iterations evaluated
    @ivar success: False when no model gathered enough inliers
    """

    def __init__(self, transform, inliers, iterations, success):
        self.transform = transform
        self.inliers = inliers
        self.iterations = iterations
        self.success = success

    def asDict(self):
        d = self.transform.asDict()
        d.update({
            'inlier_count': int(len(self.inliers)),
            'iterations': int(self.iterations),
            'success': bool(self.success),
        })
        return d


def _failure(iterations, why):
    log.msg(f'RANSAC registration failed: {why}')
    return RegistrationResult(RigidTransform.identity(),
                              np.zeros((0, 2), dtype=np.int64),
                              iterations, False)


def ransacRegister(corrs, srcXYZ, dstXYZ, params=None):
    """
    Seeded RANSAC over correspondences followed by a least-squares refit on
    the best inlier set.

    Iterations run in batches whose seeds are spawned from the master seed.
    The best hypothesis has the most inliers; ties go to the lowest
    iteration index. Correspondences are put in canonical order first, so
    the result does not depend on their input order.

    @type corrs: L{CorrespondenceSet}
    @type params: L{RansacConfig}
    @rtype: L{RegistrationResult}
    """
    if params is None:
        params = RansacConfig()
    srcXYZ = np.asarray(srcXYZ, dtype=np.float64).reshape(-1, 3)
    dstXYZ = np.asarray(dstXYZ, dtype=np.float64).reshape(-1, 3)
    s = params.sample_size

    order = np.lexsort((corrs.dst, corrs.src))
    src, dst = corrs.src[order], corrs.dst[order]
    k = len(src)
    if k < s:
        return _failure(0, f'{k} correspondences, {s} required')

    P, Q = srcXYZ[src], dstXYZ[dst]
    total = params.iterations
    nBatches = -(-total // params.batch_size)
    seeds = np.random.SeedSequence(params.seed).spawn(nBatches)

    bestCount, bestIter, bestModel = -1, -1, None
    for b, seed in enumerate(seeds):
        first = b * params.batch_size
        n = min(params.batch_size, total - first)
        rng = np.random.default_rng(seed)
        samples = _sampleBatch(rng, n, k, s)
        R, t, degenerate = _fitBatch(P[samples], Q[samples])
        moved = np.einsum('nij,kj->nki', R, P) + t[:, None, :]
        counts = (np.sqrt(((moved - Q[None]) ** 2).sum(axis=2))
                  <= params.inlier_dist).sum(axis=1)
        counts[degenerate] = -1
        i = int(np.argmax(counts))
        if counts[i] > bestCount:
            bestCount, bestIter = int(counts[i]), first + i
            bestModel = (R[i], t[i])

    if bestCount < s:
        return _failure(total, f'best model has {bestCount} inliers')

    def inliersOf(R, t):
        res = np.sqrt(((P @ R.T + t - Q) ** 2).sum(axis=1))
        return res <= params.inlier_dist

    mask = inliersOf(*bestModel)
    try:
        T = kabsch(P[mask], Q[mask])
        refit = inliersOf(T.R, T.t)
        if refit.sum() >= s:
            mask = refit
        else:
            T = RigidTransform(*bestModel)
    except DegenerateError:
        T = RigidTransform(*bestModel)

    inliers = np.stack([src[mask], dst[mask]], axis=1)
    log.msg(f'RANSAC: best hypothesis at iteration {bestIter} with '
            f'{bestCount} inliers, {int(mask.sum())} after refit')
    return RegistrationResult(T, inliers, total, True)
