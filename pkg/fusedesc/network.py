"""
Descriptor network: sparse U-Net point encoder, image-guided fusion at the
bottleneck, sparse decoder with skip connections and a 1x1x1 descriptor
head.
"""
import time

import numpy as np
from twisted.python import log

from fusedesc import autodiff, container, sparse
from fusedesc.config import NetworkConfig
from fusedesc.error import ContainerError, ContractError, EmptyTensorError
from fusedesc.fusion import AttentionFusion
from fusedesc.image import ImageEncoder


ENCODER = ('encoder1', 'encoder2', 'encoder3', 'encoder4')
DECODER = ('decoder4', 'decoder3', 'decoder2', 'decoder1')


class DescriptorField:
    """
    One descriptor per stride-1 voxel

    @ivar descriptors: L{autodiff.DenseTensor} of shape (M, C)
    @ivar coords: (M, 3) voxel coordinates
    @ivar pointMap: C{list} of original point indices per voxel
    @ivar pointToVoxel: voxel row of each original point
    @ivar pointsXYZ: (M, 3) voxel centroids in meters
    """

    def __init__(self, descriptors, coords, pointMap=None, pointToVoxel=None,
                 pointsXYZ=None):
        self.descriptors = descriptors
        self.coords = coords
        self.pointMap = pointMap
        self.pointToVoxel = pointToVoxel
        self.pointsXYZ = pointsXYZ

    def __len__(self):
        return len(self.coords)

    @property
    def values(self):
        return self.descriptors.values

    @property
    def dim(self):
        return self.descriptors.shape[1]


class ForwardResult:
    """
    @ivar field: L{DescriptorField}
    @ivar trace: C{dict} mapping layer names to (input, output)
                 L{sparse.SparseTensor} pairs
    @ivar attention: C{list} of (block name, L{fusion.FusionOutput})
    """

    def __init__(self, field, trace, attention):
        self.field = field
        self.trace = trace
        self.attention = attention


class Model:
    """
    @ivar layers: C{dict} of convolution layers by name
    @ivar norms: C{dict} of (gain, bias) per normalized layer
    @ivar imageEncoder: L{ImageEncoder} or C{None} when fusion is disabled
    @ivar fusion: C{list} of (position, L{AttentionFusion}); position is
                  C{'bottleneck'} or a decoder layer name
    """

    def __init__(self, config=None, seed=0):
        if config is None:
            config = NetworkConfig()
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        ext = config.kernel_extent
        c1, c2, c3, c4 = config.encoder_channels
        d4, d3, d2, d1 = config.decoder_channels

        self.layers = {}
        self.norms = {}

        def conv(name, cin, cout, stride, transpose=False):
            self.layers[name] = sparse.SparseConvLayer(
                name, cin, cout, ext, stride, transpose, rng=rng)
            self.norms[name] = (
                autodiff.Parameter(name + '.gain', np.ones(cout)),
                autodiff.Parameter(name + '.shift', np.zeros(cout)),
            )

        conv('encoder1', config.inputChannels, c1, 1)
        conv('encoder2', c1, c2, 2)
        conv('encoder3', c2, c3, 2)
        conv('encoder4', c3, c4, 2)

        merged = c4
        if config.with_fusion and config.decoder_merge == 'concat':
            merged = 2 * c4

        conv('decoder4', merged, d4, 2, transpose=True)
        conv('decoder3', d4 + c3, d3, 2, transpose=True)
        conv('decoder2', d3 + c2, d2, 2, transpose=True)
        conv('decoder1', d2 + c1, d1, 1, transpose=True)
        self.layers['final'] = sparse.SparseConvLayer(
            'final', d1, config.descriptor_dim, 1, 1, bias=True, rng=rng)

        self.imageEncoder = None
        self.fusion = []
        if config.with_fusion:
            ci = config.image_channels
            self.imageEncoder = ImageEncoder(outChannels=ci, rng=rng)
            self.fusion.append(('bottleneck', AttentionFusion(
                'fusion', c4, ci, config.fusion, rng)))
            if config.fusion.fusion_positions == 'three':
                for name, width in zip(DECODER[:3], (d4, d3, d2)):
                    self.fusion.append((name, AttentionFusion(
                        'fusion.' + name, width, ci, config.fusion, rng)))

    def parameters(self):
        """
        @returns: every trainable parameter, sorted by name
        """
        params = []
        for layer in self.layers.values():
            params.extend(layer.parameters())
        for gain, shift in self.norms.values():
            params.extend([gain, shift])
        if self.imageEncoder is not None:
            params.extend(self.imageEncoder.parameters())
        for _, block in self.fusion:
            params.extend(block.parameters())
        return sorted(params, key=lambda p: p.name)

    def parameterCount(self):
        return sum(p.values.size for p in self.parameters())

    def layer(self, name):
        try:
            return self.layers[name]
        except KeyError:
            raise ContractError(f'Unknown layer "{name}"')

    def zeroGrad(self):
        for p in self.parameters():
            p.zeroGrad()

    def _block(self, name, inp, trace, target=None):
        layer = self.layers[name]
        out = layer(inp, target)
        trace[name] = (inp, out)
        gain, shift = self.norms[name]
        return sparse.mapFeatures(
            out, lambda f: autodiff.relu(autodiff.rowScale(f, gain, shift)))

    def forward(self, points, colors=None, image=None):
        """
        Runs the full network on one colored cloud and its image

        @param points: (N, 3) positions in meters
        @param colors: (N, 3) colors in [0, 1], needed for C{rgb} point
                       features
        @type image: L{fusedesc.image.Image} or C{None} when fusion is
                     disabled
        @rtype: L{ForwardResult}
        """
        cfg = self.config
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(points) == 0:
            raise EmptyTensorError('Cannot extract descriptors of an empty '
                                   'cloud')
        if cfg.with_fusion and image is None:
            raise ContractError('An image is required when fusion is enabled')

        attrs = None
        if cfg.point_features == 'rgb':
            if colors is None:
                raise ContractError('RGB point features need point colors')
            attrs = colors
        x0 = sparse.voxelize(points, attrs, cfg.voxel_size)

        trace = {}
        attention = []
        blocks = dict(self.fusion)

        e1 = self._block('encoder1', x0, trace)
        e2 = self._block('encoder2', e1, trace)
        e3 = self._block('encoder3', e2, trace)
        e4 = self._block('encoder4', e3, trace)

        texture = None
        x = e4
        if cfg.with_fusion:
            texture = self.imageEncoder.encodeImage(image).feats
            res = blocks['bottleneck'](e4.feats, texture)
            attention.append(('bottleneck', res))
            merged = res.output
            if cfg.decoder_merge == 'concat':
                merged = autodiff.concatColumns(e4.feats, res.output)
            x = e4.withFeatures(merged)

        def decode(name, inp, target):
            d = self._block(name, inp, trace, target)
            if name in blocks:
                res = blocks[name](d.feats, texture)
                attention.append((name, res))
                d = d.withFeatures(res.output)
            return d

        d = decode('decoder4', x, e3)
        d = decode('decoder3', sparse.skipConcat(d, e3), e2)
        d = decode('decoder2', sparse.skipConcat(d, e2), e1)
        d = decode('decoder1', sparse.skipConcat(d, e1), e1)

        out = self.layers['final'](d)
        trace['final'] = (d, out)

        feats = out.feats
        if cfg.normalize_output:
            feats = autodiff.rowL2Normalize(feats)

        field = DescriptorField(feats, x0.coords, x0.originMap,
                                x0.pointToVoxel, x0.centroids)
        return ForwardResult(field, trace, attention)


def build(config=None, seed=0):
    """
    Builds a freshly initialized model. Identical configuration and seed give
    bit-identical parameters.

    @type config: L{NetworkConfig}
    """
    if config is None:
        config = NetworkConfig()
    model = Model(config, seed)
    log.msg(f'Built descriptor network with {model.parameterCount()} '
            f'parameters (fusion={"on" if config.with_fusion else "off"})')
    return model


def extractDescriptors(model, points, colors=None, image=None):
    """
    @rtype: L{DescriptorField}
    """
    started = time.perf_counter()
    field = model.forward(points, colors, image).field
    elapsed = time.perf_counter() - started
    log.msg(f'Extracted {len(field)} descriptors from {len(points)} points '
            f'in {elapsed:.3f}s')
    return field


# ------------------------------------------------------------------------
#                              Checkpoints
#

def saveCheckpoint(model):
    """
    @returns: encoded checkpoint container bytes
    """
    entries = [(p.name, p.values) for p in model.parameters()]
    return container.CheckpointContainer(
        model.config.asDict(), entries).rawData


def loadCheckpoint(rawData, config=None):
    """
    Restores a model from checkpoint bytes.

    @type config: L{NetworkConfig} or C{None}
    @param config: expected configuration. The checkpoint is rejected if it
                   was written for a different one
    @rtype: L{Model}
    """
    expected = None if config is None else config.asDict()
    c = container.parseContainer(rawData, expected)
    if not isinstance(c, container.CheckpointContainer):
        raise ContainerError('Not a checkpoint container')
    if config is None:
        config = NetworkConfig(**c.config)

    model = Model(config)
    params = {p.name: p for p in model.parameters()}
    stored = dict(c.entries)
    if set(stored) != set(params):
        missing = sorted(set(params) ^ set(stored))
        raise ContainerError('Checkpoint parameters do not match the '
                             'network: ' + ', '.join(missing))
    for name, p in params.items():
        if stored[name].shape != p.shape:
            raise ContainerError(f'Parameter "{name}" has shape '
                                 f'{stored[name].shape}, expected {p.shape}')
        p.values = np.array(stored[name])
    log.msg(f'Loaded checkpoint with {len(params)} parameter tensors')
    return model
