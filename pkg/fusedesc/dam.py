"""
Descriptor activation maps: per-point significance of the inputs of one
layer for the descriptor of a chosen point, computed from the gradient of
every descriptor element with respect to that layer's kernel.
"""
import json

import numpy as np
from scipy.spatial import cKDTree

from fusedesc import autodiff, fileio, sparse
from fusedesc.error import ContractError, DimensionError
from fusedesc.registration import applyTransform


class KernelGradient:
    """
    @ivar g: (S, C_in, C) kernel gradient multiplied by C{sign}
    @ivar element: descriptor element the gradient belongs to
    @ivar sign: +1 when that element is positive, -1 otherwise
    """

    def __init__(self, g, element, sign):
        self.g = g
        self.element = element
        self.sign = sign


class HeatMap:
    """
    @ivar scores: nonnegative score per output row of the target layer
    @ivar pointScores: score of every original input point
    @ivar targetLayer: name of the layer whose kernel was differentiated
    @ivar queryPoint: original index of the point being explained
    """

    def __init__(self, scores, pointScores, targetLayer, queryPoint):
        self.scores = scores
        self.pointScores = pointScores
        self.targetLayer = targetLayer
        self.queryPoint = queryPoint

    def normalized(self):
        """
        Point scores divided by their maximum when it is positive
        """
        top = self.pointScores.max() if len(self.pointScores) else 0.0
        if top > 0:
            return self.pointScores / top
        return self.pointScores.copy()

    def summary(self):
        s = self.scores
        return {
            'query_point': int(self.queryPoint),
            'target_layer': self.targetLayer,
            'max': float(s.max()),
            'mean': float(s.mean()),
            'min': float(s.min()),
            'nonzero': int((s > 0).sum()),
            'rows': int(len(s)),
        }


def targetKernelLayer(model, name):
    layer = model.layers.get(name)
    if layer is None or not sparse.IKernelLayer.providedBy(layer):
        raise ContractError(f'Layer "{name}" has no convolution kernel')
    return layer


def _queryRow(field, queryPoint):
    if not 0 <= queryPoint < len(field.pointToVoxel):
        raise ContractError(f'Query point {queryPoint} out of range')
    return int(field.pointToVoxel[queryPoint])


def _propagateElement(tape, descriptors, row, element):
    tape.zeroGrad()
    seed = np.zeros(descriptors.shape)
    seed[row, element] = 1.0
    tape.propagate(descriptors, seed)
    return 1.0 if descriptors.values[row, element] > 0 else -1.0


def _kernelGradient(tape, descriptors, row, element, layer):
    sign = _propagateElement(tape, descriptors, row, element)
    return KernelGradient(sign * layer.kernel.grad, element, sign)


def kernelGradient(model, points, colors, image, queryPoint, element,
                   targetLayer='final'):
    """
    Gradient of descriptor element C{element} of the query point's voxel
    with respect to the kernel of C{targetLayer}, times the marker sign

    @rtype: L{KernelGradient}
    """
    layer = targetKernelLayer(model, targetLayer)
    with autodiff.Tape() as tape:
        field = model.forward(points, colors, image).field
    if not 0 <= element < field.dim:
        raise ContractError(f'Descriptor element {element} out of range')
    return _kernelGradient(tape, field.descriptors,
                           _queryRow(field, queryPoint), element, layer)


def channelWeights(kg):
    """
    Sums the kernel gradient over kernel offsets and input channels

    @rtype: length C array
    """
    return kg.g.sum(axis=(0, 1))


def elementActivation(F, x):
    """
    Channel mean of the channel weighted feature map: (1/C) sum_k F[:, k] x[k]
    """
    F = np.asarray(getattr(F, 'values', F))
    x = np.asarray(x)
    if F.shape[1] != len(x):
        raise DimensionError('elementActivation', F.shape, x.shape)
    return F @ x / len(x)


def _pointScores(field, out, scores):
    """
    Maps scores on the rows of C{out} back to original points through
    voxel membership
    """
    coords = field.coords[field.pointToVoxel]
    if out.stride > 1:
        coords = np.floor_divide(coords, out.stride) * out.stride
    rows = out.index.lookup(coords)
    return np.where(rows >= 0, scores[np.maximum(rows, 0)], 0.0)


def _activation(model, points, colors, image, queryPoint, targetLayer,
                weights):
    layer = targetKernelLayer(model, targetLayer)
    with autodiff.Tape() as tape:
        res = model.forward(points, colors, image)
    field = res.field
    row = _queryRow(field, queryPoint)
    inp, out = res.trace[targetLayer]
    F = out.feats.values

    total = np.zeros(len(F))
    for i in range(field.dim):
        x = weights(tape, field.descriptors, row, i, layer, inp, out)
        total += elementActivation(F, x)
    scores = np.maximum(total, 0.0)
    return HeatMap(scores, _pointScores(field, out, scores), targetLayer,
                   queryPoint)


def descriptorActivationMap(model, points, colors, image, queryPoint,
                            targetLayer='final'):
    """
    Explains the descriptor of one point: for every descriptor element the
    kernel gradient of C{targetLayer} gives channel weights for that layer's
    output feature map. The weighted maps are summed and rectified.

    @param queryPoint: index of an original input point
    @rtype: L{HeatMap}
    """
    def weights(tape, d, row, i, layer, inp, out):
        return channelWeights(_kernelGradient(tape, d, row, i, layer))

    return _activation(model, points, colors, image, queryPoint,
                       targetLayer, weights)


def featureMapActivationMap(model, points, colors, image, queryPoint,
                            targetLayer='final'):
    """
    The same map computed from feature map gradients instead of kernel
    gradients. Agrees with L{descriptorActivationMap} for 1x1x1 target
    layers.
    """
    def weights(tape, d, row, i, layer, inp, out):
        sign = _propagateElement(tape, d, row, i)
        gz = out.feats.grad
        if gz is None:
            return np.zeros(out.channels)
        return sign * inp.feats.values.sum(axis=1) @ gz

    return _activation(model, points, colors, image, queryPoint,
                       targetLayer, weights)


def heatMapSimilarity(a, pointsA, b, pointsB, gt, radius):
    """
    Cosine similarity of two heat maps over position aligned points. Every
    point of C{pointsA} moved by C{gt} is paired with its nearest point of
    C{pointsB} when that lies within C{radius}.

    @returns: C{float} in [0, 1], 0.0 when no points align or a map is zero
    """
    moved = applyTransform(pointsA, gt)
    dist, near = cKDTree(np.asarray(pointsB)).query(moved)
    keep = dist <= radius
    x = a.pointScores[keep]
    y = b.pointScores[near[keep]]
    norm = np.linalg.norm(x) * np.linalg.norm(y)
    if norm == 0:
        return 0.0
    return float(x @ y / norm)


# ------------------------------------------------------------------------
#                 Kernel gradient / feature gradient identity
#

class KernelGradientIdentityReport:
    """
    @ivar chainRuleDiscrepancy: max |dE/dK - A^T dE/dZ|
    @ivar literalDiscrepancy: max |dE/dK[i][j] - sum_n dE/dZ[n][j] A[n][j]|,
                              C{None} unless C_in == C_out
    @ivar maxLeak: largest change of a kernel gradient column caused by
                   perturbing a different column of dE/dZ
    @ivar columnLocal: True when every perturbation stayed in its column
    """

    def __init__(self, chainRule, literal, maxLeak, columnLocal):
        self.chainRuleDiscrepancy = chainRule
        self.literalDiscrepancy = literal
        self.maxLeak = maxLeak
        self.columnLocal = columnLocal

    def asDict(self):
        return {
            'chain_rule_discrepancy': self.chainRuleDiscrepancy,
            'literal_discrepancy': self.literalDiscrepancy,
            'max_column_leak': self.maxLeak,
            'column_local': self.columnLocal,
        }


def verifyKernelGradientIdentity(layer, A, lossFn=None, seed=0,
                                 tolerance=1e-12):
    """
    Checks on a 1x1x1 layer that the kernel gradient is a linear function
    of the output feature gradient, dE/dK = A^T dE/dZ, and that column j of
    dE/dK depends on column j of dE/dZ only.

    @param A: (M, C_in) input features
    @param lossFn: maps the output L{autodiff.DenseTensor} to a scalar;
                   defaults to a seeded random weighting of its entries
    @rtype: L{KernelGradientIdentityReport}
    """
    if layer.kernelSize != 1:
        raise ContractError('The identity check needs a 1x1x1 kernel')
    A = np.asarray(A, dtype=np.float64)
    rng = np.random.default_rng(seed)
    if lossFn is None:
        weights = autodiff.DenseTensor(
            rng.normal(size=(len(A), layer.outChannels)))

        def lossFn(z):
            return autodiff.sumAll(autodiff.mul(z, weights))

    coords = np.column_stack([np.arange(len(A)), np.zeros((len(A), 2))])
    inp = sparse.SparseTensor(coords, A)

    layer.kernel.zeroGrad()
    with autodiff.Tape() as tape:
        z = sparse.sparseConv(inp, layer).feats
        loss = lossFn(z)
    autodiff.backward(loss)
    gk = layer.kernel.grad[0].copy()
    gz = z.grad.copy()

    chainRule = float(np.abs(gk - A.T @ gz).max())
    literal = None
    if A.shape[1] == gz.shape[1]:
        literal = float(np.abs(gk - (gz * A).sum(axis=0)[None, :]).max())

    maxLeak = 0.0
    for j in range(gz.shape[1]):
        bumped = gz.copy()
        bumped[:, j] += rng.normal(size=len(A))
        tape.zeroGrad()
        tape.propagate(z, bumped)
        diff = np.abs(layer.kernel.grad[0] - gk)
        diff[:, j] = 0.0
        maxLeak = max(maxLeak, float(diff.max()))
    scale = max(1.0, float(np.abs(gk).max()))
    return KernelGradientIdentityReport(chainRule, literal, maxLeak,
                                        maxLeak <= tolerance * scale)


# ------------------------------------------------------------------------
#                                 Export
#

def heatMapColors(heatmap, points, knn=10):
    """
    Red (high) to blue (low) ramp over the normalized point scores. The
    C{knn} nearest neighbors of the query point are drawn black.
    """
    s = heatmap.normalized()
    colors = np.column_stack([s, np.zeros_like(s), 1.0 - s])
    if knn > 0:
        points = np.asarray(points)
        k = min(knn, len(points))
        _, near = cKDTree(points).query(points[heatmap.queryPoint], k=k)
        colors[np.atleast_1d(near)] = 0.0
    return colors


def exportHeatMap(heatmap, points, knn=10):
    """
    @returns: (PLY bytes, JSON sidecar bytes)
    """
    ply = fileio.writePLY(points, heatMapColors(heatmap, points, knn))
    sidecar = json.dumps(heatmap.summary(), sort_keys=True) + '\n'
    return ply, sidecar.encode('utf-8')
