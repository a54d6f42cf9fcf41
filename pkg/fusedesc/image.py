"""
Image texture encoder: three stride-2 convolution blocks followed by a 1x1
projection, producing one feature row per 8x8 pixel cell.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from fusedesc import autodiff
from fusedesc.error import ContractError, DimensionError


class Image:
    """
    RGB image with channels in [0, 1]

    @ivar pixels: (H, W, 3) float64 array
    """

    def __init__(self, pixels):
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise DimensionError('Image pixels', pixels.shape, ('H', 'W', 3))
        h, w = pixels.shape[:2]
        if h == 0 or w == 0 or h % 8 or w % 8:
            raise ContractError(
                f'Image dimensions must be positive multiples of 8, '
                f'got {w}x{h}')
        if pixels.min() < 0.0 or pixels.max() > 1.0:
            raise ContractError('Image channels must lie in [0, 1]')
        self.pixels = pixels
        self.noVisiblePoints = False

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @classmethod
    def centerCropped(cls, pixels):
        """
        Builds an image from arbitrary sized pixels by center-cropping both
        dimensions down to a multiple of 8
        """
        pixels = np.asarray(pixels, dtype=np.float64)
        h, w = pixels.shape[:2]
        h8, w8 = h - h % 8, w - w % 8
        top, left = (h - h8) // 2, (w - w8) // 2
        return cls(pixels[top:top + h8, left:left + w8])


class ImageFeatures:
    """
    Texture feature matrix with its grid layout. Row r belongs to grid cell
    (r // gridWidth, r % gridWidth).
    """

    def __init__(self, feats, grid):
        self.feats = feats
        self.grid = tuple(grid)
        if feats.shape[0] != self.grid[0] * self.grid[1]:
            raise DimensionError('ImageFeatures', feats.shape, self.grid)

    def __len__(self):
        return self.feats.shape[0]


def conv2d(inp, kernel, bias=None, stride=1):
    """
    2-D convolution with zero "same" padding.

    @param inp: L{autodiff.DenseTensor} of shape (H, W, C_in)
    @param kernel: L{autodiff.Parameter} of shape (k, k, C_in, C_out), k odd
    @returns: L{autodiff.DenseTensor} of shape (ceil(H/stride),
              ceil(W/stride), C_out)
    """
    x = inp.values
    kv = kernel.values
    if x.ndim != 3 or kv.ndim != 4 or kv.shape[0] != kv.shape[1] \
            or kv.shape[2] != x.shape[2]:
        raise DimensionError('conv2d', x.shape, kv.shape)
    k = kv.shape[0]
    if k % 2 == 0 or stride not in (1, 2):
        raise ContractError('conv2d needs an odd kernel and stride 1 or 2')
    if bias is not None and bias.shape != (kv.shape[3],):
        raise DimensionError('conv2d bias', bias.shape, (kv.shape[3],))

    h, w, cin = x.shape
    cout = kv.shape[3]
    p = k // 2
    padded = np.pad(x, ((p, p), (p, p), (0, 0)))
    ho = (h + 2 * p - k) // stride + 1
    wo = (w + 2 * p - k) // stride + 1

    win = sliding_window_view(padded, (k, k), axis=(0, 1))
    win = win[::stride, ::stride][:ho, :wo]
    cols = win.transpose(0, 1, 3, 4, 2).reshape(ho * wo, k * k * cin)
    kmat = kv.reshape(k * k * cin, cout)

    res = cols @ kmat
    if bias is not None:
        res = res + bias.values
    out = autodiff.DenseTensor(res.reshape(ho, wo, cout))

    def back(g):
        g2 = g.reshape(ho * wo, cout)
        gcols = (g2 @ kmat.T).reshape(ho, wo, k, k, cin)
        gpad = np.zeros_like(padded)
        for dy in range(k):
            for dx in range(k):
                gpad[dy:dy + stride * ho:stride,
                     dx:dx + stride * wo:stride] += gcols[:, :, dy, dx, :]
        grads = (gpad[p:p + h, p:p + w], (cols.T @ g2).reshape(kv.shape))
        if bias is not None:
            grads += (g2.sum(axis=0),)
        return grads

    inputs = (inp, kernel) if bias is None else (inp, kernel, bias)
    return autodiff.recordOperation(out, inputs, back)


def _uniform(rng, shape, fanIn):
    bound = np.sqrt(6.0 / fanIn)
    return rng.uniform(-bound, bound, shape)


class ImageEncoder:
    """
    Small strided encoder standing in for a pre-trained backbone stage.

    @ivar blocks: C{list} of (kernel, bias) parameter pairs, one per
                  stride-2 block
    @ivar projection: 1x1 kernel mapping the last block to C{outChannels}
    """

    def __init__(self, channels=(8, 16, 32), outChannels=32, rng=None,
                 prefix='image'):
        if rng is None:
            rng = np.random.default_rng(0)
        self.blocks = []
        cin = 3
        for n, cout in enumerate(channels, start=1):
            kernel = autodiff.Parameter(
                f'{prefix}.block{n}.kernel',
                _uniform(rng, (3, 3, cin, cout), 9 * cin))
            bias = autodiff.Parameter(f'{prefix}.block{n}.bias',
                                      np.zeros(cout))
            self.blocks.append((kernel, bias))
            cin = cout
        self.projection = autodiff.Parameter(
            f'{prefix}.project.kernel',
            _uniform(rng, (1, 1, cin, outChannels), cin))
        self.outChannels = outChannels

    def parameters(self):
        params = []
        for kernel, bias in self.blocks:
            params.extend([kernel, bias])
        params.append(self.projection)
        return params

    def encodeImage(self, img):
        """
        @type img: L{Image}
        @rtype: L{ImageFeatures} with (H/8)*(W/8) rows
        """
        if img.height % 8 or img.width % 8:
            raise ContractError('Image dimensions must be multiples of 8')
        x = autodiff.DenseTensor(img.pixels)
        for kernel, bias in self.blocks:
            x = autodiff.relu(conv2d(x, kernel, bias, stride=2))
        x = conv2d(x, self.projection)
        gh, gw = img.height // 8, img.width // 8
        feats = autodiff.reshape(x, (gh * gw, self.outChannels))
        return ImageFeatures(feats, (gh, gw))


def encodeImage(encoder, img):
    return encoder.encodeImage(img)
