"""
Sparse voxel tensors and sparse (transpose) convolution.

Coordinates are integer voxel indices at the finest resolution. A tensor of
stride s only holds coordinates divisible by s, and its kernel offsets are
scaled by s. Coordinate rows are always kept unique and in lexicographic
order so that every computation is reproducible bit for bit.
"""
import numpy as np
from zope.interface import Attribute, implementer, Interface

from fusedesc import autodiff
from fusedesc.error import (
    AlignmentError,
    ContractError,
    DimensionError,
    EmptyTensorError,
)

_BITS = 21
_BIAS = 1 << (_BITS - 1)
_MASK = (1 << _BITS) - 1


def packCoords(coords):
    """
    Packs integer (x, y, z) rows into 63-bit keys. Key order equals the
    lexicographic order of the coordinate rows.
    """
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3) + _BIAS
    if c.size and (c.min() < 0 or c.max() > _MASK):
        raise ContractError('Voxel coordinates outside the packable range')
    return (c[:, 0] << (2 * _BITS)) | (c[:, 1] << _BITS) | c[:, 2]


def sortedUniqueCoords(coords):
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if len(coords) == 0:
        return coords
    return np.unique(coords, axis=0)


def downsampleCoords(coords, stride):
    """
    Unique floor(coords / stride) * stride, lexicographically sorted
    """
    coords = np.asarray(coords, dtype=np.int64)
    return sortedUniqueCoords(np.floor_divide(coords, stride) * stride)


def kernelOffsets(extent):
    """
    @returns: (extent**3, 3) integer offsets in lexicographic order
    """
    if extent < 1 or extent % 2 == 0:
        raise ContractError(f'Kernel extent must be odd, got {extent}')
    r = extent // 2
    axis = np.arange(-r, r + 1, dtype=np.int64)
    grid = np.meshgrid(axis, axis, axis, indexing='ij')
    return np.stack(grid, axis=-1).reshape(-1, 3)


class CoordinateIndex:
    """
    Lookup table from coordinate rows to row indices. Keys are packed
    coordinates kept in sorted order and queried by vectorized binary
    search.
    """

    def __init__(self, coords):
        keys = packCoords(coords)
        order = np.argsort(keys, kind='stable')
        self._keys = keys[order]
        self._rows = order
        if len(keys) > 1 and np.any(self._keys[1:] == self._keys[:-1]):
            raise ContractError('Duplicate voxel coordinates')

    def __len__(self):
        return len(self._keys)

    def lookup(self, coords):
        """
        @returns: row index of every query coordinate, -1 where absent
        """
        q = packCoords(coords)
        if len(self._keys) == 0:
            return np.full(len(q), -1, dtype=np.int64)
        pos = np.searchsorted(self._keys, q)
        pos = np.minimum(pos, len(self._keys) - 1)
        hit = self._keys[pos] == q
        return np.where(hit, self._rows[pos], -1)


class SparseTensor:
    """
    Voxel coordinates plus one feature row per voxel

    @ivar coords: (M, 3) int64 voxel coordinates, unique and sorted
    @ivar feats: L{autodiff.DenseTensor} of shape (M, C)
    @ivar stride: power of two; every coordinate is divisible by it
    @ivar voxelSize: edge length of a stride-1 voxel in meters
    @ivar originMap: for stride-1 tensors, C{list} of arrays of the original
                     point indices absorbed by each voxel
    @ivar pointToVoxel: for stride-1 tensors, voxel row of every original
                        point
    @ivar centroids: (M, 3) mean position of the absorbed points, or None
    """

    def __init__(self, coords, feats, stride=1, voxelSize=1.0,
                 originMap=None, pointToVoxel=None, centroids=None):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        if not isinstance(feats, autodiff.DenseTensor):
            feats = autodiff.DenseTensor(feats)
        if feats.values.ndim != 2 or feats.shape[0] != len(coords):
            raise DimensionError('SparseTensor features', feats.shape,
                                 (len(coords), 'C'))
        if stride < 1 or stride & (stride - 1):
            raise ContractError(f'Stride must be a power of 2, got {stride}')
        if np.any(coords % stride):
            raise ContractError(
                f'Coordinates are not divisible by stride {stride}')
        if voxelSize <= 0:
            raise ContractError('Voxel size must be positive')

        keys = packCoords(coords)
        if len(keys) > 1 and np.any(keys[1:] <= keys[:-1]):
            raise ContractError(
                'Coordinates must be unique and lexicographically sorted')

        self.coords = coords
        self.feats = feats
        self.stride = int(stride)
        self.voxelSize = float(voxelSize)
        self.originMap = originMap
        self.pointToVoxel = pointToVoxel
        self.centroids = centroids
        self._index = None

    def __len__(self):
        return len(self.coords)

    @property
    def channels(self):
        return self.feats.shape[1]

    @property
    def index(self):
        if self._index is None:
            self._index = CoordinateIndex(self.coords)
        return self._index

    def withFeatures(self, feats):
        """
        Returns a tensor with the same coordinates and bookkeeping and new
        features
        """
        return SparseTensor(self.coords, feats, self.stride, self.voxelSize,
                            self.originMap, self.pointToVoxel, self.centroids)


def voxelize(points, attributes=None, voxelSize=1.0):
    """
    Quantizes points to an integer grid and pools attributes per voxel.

    @param points: (N, 3) positions in meters
    @param attributes: optional (N, A) per point attributes. When absent
                       every voxel gets a single feature of 1
    @rtype: L{SparseTensor} of stride 1
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise EmptyTensorError('Cannot voxelize an empty point set')
    if voxelSize <= 0:
        raise ContractError('Voxel size must be positive')

    coords = np.floor(points / voxelSize).astype(np.int64)
    uniq, inverse = np.unique(coords, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    m = len(uniq)
    counts = np.bincount(inverse, minlength=m).astype(np.float64)

    def pooled(values):
        sums = np.zeros((m, values.shape[1]))
        np.add.at(sums, inverse, values)
        return sums / counts[:, None]

    if attributes is None:
        feats = np.ones((m, 1))
    else:
        attributes = np.asarray(attributes, dtype=np.float64)
        if attributes.ndim == 1:
            attributes = attributes[:, None]
        if len(attributes) != len(points):
            raise DimensionError('voxelize attributes', attributes.shape,
                                 points.shape)
        feats = pooled(attributes)

    order = np.argsort(inverse, kind='stable')
    originMap = np.split(order, np.cumsum(counts.astype(np.int64))[:-1])

    return SparseTensor(uniq, feats, 1, voxelSize, originMap, inverse,
                        pooled(points))


# ------------------------------------------------------------------------
#                           Convolution layers
#

class IKernelLayer (Interface):
    """
    Layers holding a convolution kernel that can receive gradients
    """
    name = Attribute('Layer identifier')
    kernel = Attribute('Parameter of shape (S, C_in, C_out)')


@implementer(IKernelLayer)
class SparseConvLayer:
    """
    Sparse convolution (or transpose convolution) layer

    @ivar kernel: L{autodiff.Parameter} of shape (S, C_in, C_out) with
                  S = kernelExtent ** 3
    @ivar bias: optional L{autodiff.Parameter} of shape (C_out,)
    """

    def __init__(self, name, inChannels, outChannels, kernelExtent=3,
                 stride=1, transpose=False, bias=False, rng=None):
        if inChannels < 1 or outChannels < 1:
            raise ContractError('Layer channel counts must be positive')
        if stride not in (1, 2):
            raise ContractError(f'Unsupported stride {stride}')
        self.name = name
        self.kernelExtent = kernelExtent
        self.offsets = kernelOffsets(kernelExtent)
        self.stride = stride
        self.transpose = transpose

        if rng is None:
            rng = np.random.default_rng(0)
        shape = (len(self.offsets), inChannels, outChannels)
        bound = np.sqrt(6.0 / (shape[0] * inChannels))
        self.kernel = autodiff.Parameter(
            name + '.kernel', rng.uniform(-bound, bound, shape))
        self.bias = None
        if bias:
            self.bias = autodiff.Parameter(name + '.bias',
                                           np.zeros(outChannels))

    @property
    def kernelSize(self):
        return len(self.offsets)

    @property
    def inChannels(self):
        return self.kernel.shape[1]

    @property
    def outChannels(self):
        return self.kernel.shape[2]

    def parameters(self):
        return [self.kernel] if self.bias is None else [self.kernel, self.bias]

    def __call__(self, inp, target=None):
        if self.transpose:
            return sparseTransposeConv(inp, self, target)
        return sparseConv(inp, self)


class KernelMap:
    """
    For each kernel offset, the (input row, output row) pairs it connects

    @ivar offsets: (S, 3) kernel offsets in units of the effective step
    @ivar pairs: C{list} of S (inputRows, outputRows) array pairs
    """

    def __init__(self, offsets, pairs):
        self.offsets = offsets
        self.pairs = pairs

    def __len__(self):
        return sum(len(i) for i, _ in self.pairs)

    def asSet(self):
        return {
            (s, int(i), int(j))
            for s, (ii, jj) in enumerate(self.pairs)
            for i, j in zip(ii, jj)
        }


def outputCoords(inp, layer):
    if layer.stride == 1:
        return inp.coords
    return downsampleCoords(inp.coords, inp.stride * 2)


def buildKernelMap(inp, outCoords, layer):
    """
    Builds the neighborhood pairs of a layer.

    For a convolution, output row j gathers input row i through offset o iff
    coords_in[i] = coords_out[j] + o * s, with s the input stride. For a
    transpose convolution the relation runs the other way:
    coords_out[i] = coords_in[j] + o * s, with s the output stride, which
    makes it the adjoint of the matching convolution.

    @rtype: L{KernelMap}
    """
    outCoords = np.asarray(outCoords, dtype=np.int64).reshape(-1, 3)
    offsets = layer.offsets
    pairs = []

    if not layer.transpose:
        step = inp.stride
        index = inp.index
        for o in offsets:
            rows = index.lookup(outCoords + o * step)
            valid = np.nonzero(rows >= 0)[0]
            pairs.append((rows[valid], valid))
    else:
        step = inp.stride // layer.stride
        index = CoordinateIndex(outCoords)
        for o in offsets:
            rows = index.lookup(inp.coords + o * step)
            valid = np.nonzero(rows >= 0)[0]
            pairs.append((valid, rows[valid]))

    return KernelMap(offsets, pairs)


def _gatherScatter(inp, layer, kmap, outRows):
    x = inp.feats.values
    k = layer.kernel.values
    res = np.zeros((outRows, k.shape[2]))
    for s, (ii, jj) in enumerate(kmap.pairs):
        if len(ii):
            res[jj] += x[ii] @ k[s]
    if layer.bias is not None:
        res += layer.bias.values
    out = autodiff.DenseTensor(res)

    def back(g):
        gx = np.zeros_like(x)
        gk = np.zeros_like(k)
        for s, (ii, jj) in enumerate(kmap.pairs):
            if len(ii):
                gs = g[jj]
                gx[ii] += gs @ k[s].T
                gk[s] = x[ii].T @ gs
        grads = (gx, gk)
        if layer.bias is not None:
            grads += (g.sum(axis=0),)
        return grads

    return autodiff.recordOperation(
        out, (inp.feats,) + tuple(layer.parameters()), back)


def _checkChannels(inp, layer):
    if inp.channels != layer.inChannels:
        raise DimensionError(f'{layer.name} input channels', inp.feats.shape,
                             layer.kernel.shape)


def sparseConv(inp, layer):
    """
    Sparse convolution. A stride-2 layer halves the resolution (doubles the
    tensor stride); its output coordinates are the unique downsampled input
    coordinates.

    @rtype: L{SparseTensor}
    """
    _checkChannels(inp, layer)
    coords = outputCoords(inp, layer)
    kmap = buildKernelMap(inp, coords, layer)
    feats = _gatherScatter(inp, layer, kmap, len(coords))
    if layer.stride == 1:
        return inp.withFeatures(feats)
    return SparseTensor(coords, feats, inp.stride * 2, inp.voxelSize)


def sparseTransposeConv(inp, layer, target):
    """
    Sparse transpose convolution onto the coordinates of C{target}, normally
    the encoder level of matching resolution.

    @type target: L{SparseTensor} or (K, 3) coordinate array
    @rtype: L{SparseTensor}
    """
    _checkChannels(inp, layer)
    template = target if isinstance(target, SparseTensor) else None
    coords = target.coords if template is not None else target
    if coords is None or len(coords) == 0:
        raise ContractError('Transpose convolution needs target coordinates')
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    stride = inp.stride // layer.stride
    if stride < 1:
        raise ContractError('Cannot upsample a stride-1 tensor')
    kmap = buildKernelMap(inp, coords, layer)
    feats = _gatherScatter(inp, layer, kmap, len(coords))
    if template is not None and template.stride == stride:
        return template.withFeatures(feats)
    return SparseTensor(coords, feats, stride, inp.voxelSize)


def skipConcat(a, b):
    """
    Concatenates the features of two tensors defined on the same
    coordinates
    """
    if a.stride != b.stride or not np.array_equal(a.coords, b.coords):
        raise AlignmentError('skipConcat needs identical coordinate sets')
    return a.withFeatures(autodiff.concatColumns(a.feats, b.feats))


def mapFeatures(inp, fn):
    """
    Applies a row-wise dense function to the features of C{inp}
    """
    return inp.withFeatures(fn(inp.feats))
