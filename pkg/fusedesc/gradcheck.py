"""
Self-verification suite: finite difference checks of every differentiable
operation, the kernel gradient identity on 1x1x1 layers and agreement of
the two activation map routes.
"""
import numpy as np
from twisted.python import log

from fusedesc import autodiff, dam, sparse
from fusedesc.config import FusionConfig, NetworkConfig
from fusedesc.fusion import AttentionFusion, fuse
from fusedesc.image import Image, conv2d
from fusedesc.network import build
from fusedesc.training import hardestContrastiveLoss


def microNetworkConfig(**overrides):
    """
    Smallest useful network, used by the suite and by tests
    """
    values = dict(encoder_channels=[3, 4, 4, 5],
                  decoder_channels=[4, 4, 3, 3],
                  descriptor_dim=4, image_channels=3, voxel_size=1.0,
                  fusion=FusionConfig(c_t=2))
    values.update(overrides)
    return NetworkConfig(**values)


def microInput(rng, voxels=2):
    points = np.array([[0.1, 0.2, 0.3], [1.4, 0.2, 0.6], [0.3, 1.5, 1.2],
                       [2.2, 1.1, 0.4]])[:voxels]
    colors = rng.uniform(0.0, 1.0, (voxels, 3))
    image = Image(rng.uniform(0.0, 1.0, (8, 8, 3)))
    return points, colors, image


def _sparseInput(rng, channels):
    coords = np.array([[0, 0, 0], [0, 0, 1], [0, 1, 1], [1, 0, 0],
                       [1, 1, 1], [2, 1, 0], [2, 2, 2]])
    return sparse.SparseTensor(coords, rng.normal(size=(7, channels)))


def _cases(rng):
    t = autodiff.DenseTensor
    b = t(rng.normal(size=(4, 2)))
    w = autodiff.Parameter('w', rng.normal(size=(4, 3)))
    gain = autodiff.Parameter('gain', rng.uniform(0.5, 1.5, 4))
    shift = autodiff.Parameter('shift', rng.normal(size=4))
    away = rng.normal(size=(3, 4))
    away += np.sign(away) * 0.5

    yield 'matmul', lambda x: autodiff.matmul(x, b), t(rng.normal(size=(3, 4)))
    yield 'rowSoftmax', lambda x: autodiff.rowSoftmax(x, 1.7), \
        t(rng.normal(size=(3, 4)))
    yield 'relu', autodiff.relu, t(away)
    yield 'linear', lambda x: autodiff.linear(t(away), x), w
    yield 'rowScale', lambda x: autodiff.rowScale(x, gain, shift), \
        t(rng.normal(size=(3, 4)))
    yield 'rowL2Normalize', autodiff.rowL2Normalize, t(away)

    inp = _sparseInput(rng, 2)
    conv = sparse.SparseConvLayer('conv', 2, 3, rng=rng)
    yield 'sparseConv.kernel', lambda x: sparse.sparseConv(inp, conv).feats, \
        conv.kernel
    yield 'sparseConv.features', \
        lambda x: sparse.sparseConv(inp.withFeatures(x), conv).feats, \
        t(inp.feats.values)
    down = sparse.SparseConvLayer('down', 2, 3, stride=2, rng=rng)
    yield 'sparseConv.stride2', lambda x: sparse.sparseConv(inp, down).feats, \
        down.kernel
    coarse = sparse.sparseConv(inp, down)
    up = sparse.SparseConvLayer('up', 3, 2, stride=2, transpose=True, rng=rng)
    coarseFeats = t(coarse.feats.values)
    yield 'sparseTransposeConv', \
        lambda x: sparse.sparseTransposeConv(
            coarse.withFeatures(coarseFeats), up, inp).feats, up.kernel

    pixels = t(rng.uniform(size=(8, 8, 3)))
    kernel = autodiff.Parameter('k', rng.normal(size=(3, 3, 3, 2)))
    yield 'conv2d', lambda x: conv2d(pixels, x, stride=2), kernel

    block = AttentionFusion('fusion', 4, 3, FusionConfig(
        c_t=2, self_attention_layers=1), rng)
    structure = t(rng.normal(size=(5, 4)))
    texture = t(rng.normal(size=(6, 3)))
    yield 'fuse.query', lambda x: fuse(block, structure, texture).output, \
        block.query
    yield 'fuse.texture', lambda x: fuse(block, structure, x).output, texture
    swapped = AttentionFusion('swapped', 4, 3, FusionConfig(
        c_t=2, query_source='image'), rng)
    yield 'fuse.imageQueries', \
        lambda x: fuse(swapped, x, texture).output, t(structure.values)

    fb = t(rng.normal(size=(6, 4)))
    pairs = np.array([[0, 1], [2, 2], [4, 0]])
    yield 'hardestContrastiveLoss', \
        lambda x: hardestContrastiveLoss(x, fb, pairs), \
        t(rng.normal(size=(5, 4)))


class GradientSuiteReport:
    """
    @ivar checks: C{list} of (case name, max relative error)
    @ivar identity: L{dam.KernelGradientIdentityReport}
    @ivar routeDiscrepancy: max abs difference of kernel and feature map
                            activation maps on a 1x1x1 target layer
    """

    def __init__(self, checks, network, identity, routeDiscrepancy):
        self.checks = checks
        self.network = network
        self.identity = identity
        self.routeDiscrepancy = routeDiscrepancy

    @property
    def maxRelativeError(self):
        return max(err for _, err in self.checks)

    @property
    def maxNetworkError(self):
        return max(err for _, err in self.network)

    def passed(self, tolerance=1e-5, networkTolerance=1e-4):
        return (self.maxRelativeError < tolerance
                and self.maxNetworkError < networkTolerance
                and self.identity.chainRuleDiscrepancy < 1e-10
                and self.identity.columnLocal
                and self.routeDiscrepancy < 1e-8)

    def asDict(self):
        return {
            'operations': {name: err for name, err in self.checks},
            'network': {name: err for name, err in self.network},
            'max_relative_error': self.maxRelativeError,
            'max_network_error': self.maxNetworkError,
            'kernel_gradient_identity': self.identity.asDict(),
            'activation_route_discrepancy': self.routeDiscrepancy,
            'passed': self.passed(),
        }


def runSuite(seed=0):
    """
    @rtype: L{GradientSuiteReport}
    """
    rng = np.random.default_rng(seed)

    checks = []
    for name, f, x in _cases(rng):
        err = autodiff.finiteDiffCheck(f, x, seed=seed).maxRelativeError
        checks.append((name, err))
        log.msg(f'gradcheck {name}: {err:.3e}')

    model = build(microNetworkConfig(point_features='rgb'), seed)
    points, colors, image = microInput(rng)
    params = {p.name: p for p in model.parameters()}
    network = []
    for name in ('encoder1.kernel', 'decoder1.kernel', 'final.kernel',
                 'fusion.query', 'image.project.kernel'):
        err = autodiff.finiteDiffCheck(
            lambda x: model.forward(points, colors, image).field.descriptors,
            params[name], seed=seed).maxRelativeError
        network.append((name, err))
        log.msg(f'gradcheck network {name}: {err:.3e}')

    layer = sparse.SparseConvLayer('identity', 4, 3, kernelExtent=1, rng=rng)
    identity = dam.verifyKernelGradientIdentity(
        layer, rng.normal(size=(6, 4)), seed=seed)

    points, colors, image = microInput(rng, 4)
    viaKernel = dam.descriptorActivationMap(model, points, colors, image, 0)
    viaFeatures = dam.featureMapActivationMap(model, points, colors, image, 0)
    route = float(np.abs(viaKernel.scores - viaFeatures.scores).max())

    return GradientSuiteReport(checks, network, identity, route)
