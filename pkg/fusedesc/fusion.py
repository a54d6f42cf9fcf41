"""
Single-head cross-attention that adds weighted image texture to per-point
structure features.
"""
import csv
import io
import json

import numpy as np

from fusedesc import autodiff
from fusedesc.config import FusionConfig
from fusedesc.error import DimensionError


# points that no image cell attends to receive no texture
COLUMN_FLOOR = 1e-12


def _uniform(rng, shape):
    bound = np.sqrt(6.0 / shape[0])
    return rng.uniform(-bound, bound, shape)


class FusionOutput:
    """
    @ivar fused: structure + texture, elementwise
    @ivar weights: (M_points, M_image) attention weights, rows sum to 1
    @ivar texture: per point texture contribution
    @ivar output: C{fused} after the optional self-attention layers
    """

    def __init__(self, fused, weights, texture, output=None):
        self.fused = fused
        self.weights = weights
        self.texture = texture
        self.output = fused if output is None else output


class SelfAttention:
    """
    Residual self-attention over point features: x + MLP(softmax(QK^T) V)
    """

    def __init__(self, name, channels, width, rng):
        self.name = name
        self.width = width
        self.query = autodiff.Parameter(name + '.query',
                                        _uniform(rng, (channels, width)))
        self.key = autodiff.Parameter(name + '.key',
                                      _uniform(rng, (channels, width)))
        self.value = autodiff.Parameter(name + '.value',
                                        _uniform(rng, (channels, width)))
        self.out = autodiff.Parameter(name + '.out',
                                      _uniform(rng, (width, channels)))
        self.outBias = autodiff.Parameter(name + '.out_bias',
                                          np.zeros(channels))

    def parameters(self):
        return [self.query, self.key, self.value, self.out, self.outBias]

    def __call__(self, x):
        q = autodiff.linear(x, self.query)
        k = autodiff.linear(x, self.key)
        v = autodiff.linear(x, self.value)
        w = attentionWeights(q, k, self.width)
        return x + autodiff.linear(w @ v, self.out, self.outBias)


class AttentionFusion:
    """
    Cross-attention fusion block.

    With C{query_source} set to C{points} (the default) structure features
    form the queries and image features the keys and values. With C{image}
    the roles swap: image cells attend over points, and the resulting cell
    features are distributed back to points through the column-normalized
    transpose of the attention matrix.

    @ivar width: projection width c_t
    """

    def __init__(self, name, pointChannels, imageChannels, config=None,
                 rng=None):
        if config is None:
            config = FusionConfig()
        if rng is None:
            rng = np.random.default_rng(0)
        self.name = name
        self.config = config
        self.pointChannels = pointChannels
        self.imageChannels = imageChannels
        self.width = config.width(pointChannels)
        self.imageQueries = config.query_source == 'image'

        if self.imageQueries:
            qIn, kvIn = imageChannels, pointChannels
        else:
            qIn, kvIn = pointChannels, imageChannels

        ct = self.width
        self.query = autodiff.Parameter(name + '.query',
                                        _uniform(rng, (qIn, ct)))
        self.key = autodiff.Parameter(name + '.key',
                                      _uniform(rng, (kvIn, ct)))
        self.value = autodiff.Parameter(name + '.value',
                                        _uniform(rng, (kvIn, ct)))
        self.out = autodiff.Parameter(name + '.out',
                                      _uniform(rng, (ct, pointChannels)))
        self.outBias = autodiff.Parameter(name + '.out_bias',
                                          np.zeros(pointChannels))
        self.selfAttention = [
            SelfAttention(f'{name}.sa{n}', pointChannels, ct, rng)
            for n in range(1, config.self_attention_layers + 1)
        ]

    def parameters(self):
        params = [self.query, self.key, self.value, self.out, self.outBias]
        for layer in self.selfAttention:
            params.extend(layer.parameters())
        return params

    def __call__(self, structure, texture):
        return fuse(self, structure, texture)


def projectQKV(block, structure, texture):
    """
    Projects structure (M_points x C_points) and image (M_image x C_image)
    features to queries, keys and values of width c_t

    @type block: L{AttentionFusion}
    @returns: (Q, K, V) L{autodiff.DenseTensor} triple
    """
    if structure.shape[1] != block.pointChannels:
        raise DimensionError(f'{block.name} structure features',
                             structure.shape, (None, block.pointChannels))
    if texture.shape[1] != block.imageChannels:
        raise DimensionError(f'{block.name} image features', texture.shape,
                             (None, block.imageChannels))
    if block.imageQueries:
        qSource, kvSource = texture, structure
    else:
        qSource, kvSource = structure, texture
    return (autodiff.linear(qSource, block.query),
            autodiff.linear(kvSource, block.key),
            autodiff.linear(kvSource, block.value))


def attentionWeights(q, k, width):
    """
    W = rowSoftmax(Q K^T / sqrt(c_t)); each row is a distribution over the
    keys
    """
    if q.shape[1] != k.shape[1]:
        raise DimensionError('attentionWeights', q.shape, k.shape)
    return autodiff.rowSoftmax(q @ autodiff.transpose(k), np.sqrt(width))


def fuse(block, structure, texture):
    """
    Adds attention-weighted texture to every structure feature row.

    @param structure: (M_points, C_points) point features
    @param texture: (M_image, C_image) image features
    @rtype: L{FusionOutput}
    """
    q, k, v = projectQKV(block, structure, texture)
    w = attentionWeights(q, k, block.width)

    if block.imageQueries:
        cells = w @ v
        w = autodiff.rowSumNormalize(autodiff.transpose(w), COLUMN_FLOOR)
        mixed = w @ cells
    else:
        mixed = w @ v

    fi = autodiff.linear(mixed, block.out, block.outBias)
    fused = structure + fi

    out = fused
    for layer in block.selfAttention:
        out = layer(out)

    return FusionOutput(fused, w, fi, out)


# ------------------------------------------------------------------------
#                         Attention weight dumps
#

def dumpWeights(weights, fmt='json'):
    """
    Serializes an attention matrix (rows = points, columns = image cells)

    @param fmt: C{'json'} or C{'csv'}
    @rtype: C{bytes}
    """
    w = np.asarray(getattr(weights, 'values', weights), dtype=np.float64)
    if fmt == 'json':
        doc = {
            'rows': int(w.shape[0]),
            'cols': int(w.shape[1]),
            'weights': [[float(x) for x in row] for row in w],
        }
        return (json.dumps(doc, sort_keys=True) + '\n').encode('utf-8')
    if fmt == 'csv':
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator='\n')
        writer.writerow(['point'] + [f'cell{j}' for j in range(w.shape[1])])
        for i, row in enumerate(w):
            writer.writerow([i] + [repr(float(x)) for x in row])
        return buf.getvalue().encode('utf-8')
    raise ValueError(f'Unknown attention dump format: {fmt}')
