"""
Dense tensors with tape based reverse-mode differentiation.

Every operation in this module (and the sparse/image operations built on
top of it) computes its value eagerly with numpy and, when a L{Tape} is
active on the current thread and one of its inputs is tracked, records a
local backward rule on that tape. L{backward} replays the tape in reverse
execution order, visiting each recorded operation exactly once.
"""
import contextlib
import threading

import numpy as np

from fusedesc.error import ContractError, DimensionError, NumericError


_local = threading.local()


def _stack():
    try:
        return _local.stack
    except AttributeError:
        _local.stack = []
        return _local.stack


def currentTape():
    """
    @rtype: L{Tape} or C{None}
    @returns: the innermost tape active on the calling thread
    """
    stack = _stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def noGrad():
    """
    Suspends recording on the calling thread for the duration of the
    block
    """
    stack = _stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class DenseTensor:
    """
    An n-dimensional array of 64-bit reals with an attached gradient slot.

    @ivar values: C{numpy.ndarray} of float64
    @ivar grad: C{None} or an array of the same shape filled by backward
                passes
    @ivar requiresGrad: True for leaves whose gradient should be kept
    """
    __slots__ = ['values', 'grad', 'requiresGrad', '_tape']

    def __init__(self, values, requiresGrad=False):
        values = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise NumericError('Non-finite entries in tensor')
        self.values = values
        self.grad = None
        self.requiresGrad = requiresGrad
        self._tape = None

    @property
    def shape(self):
        return self.values.shape

    def tracked(self, tape):
        return self.requiresGrad or (tape is not None and self._tape is tape)

    def item(self):
        return float(self.values.reshape(-1)[0])

    def __repr__(self):
        return f'DenseTensor(shape={self.shape})'

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter (DenseTensor):
    """
    A named trainable tensor. Gradients accumulate additively across
    backward calls until L{zeroGrad} is called.
    """
    __slots__ = ['name']

    def __init__(self, name, values):
        DenseTensor.__init__(
            self, np.array(values, dtype=np.float64), requiresGrad=True)
        self.name = name
        self.grad = np.zeros_like(self.values)

    @property
    def tensor(self):
        return self

    def zeroGrad(self):
        self.grad = np.zeros_like(self.values)

    def __repr__(self):
        return f'Parameter({self.name!r}, shape={self.shape})'


class _Node:
    __slots__ = ['output', 'inputs', 'backward']

    def __init__(self, output, inputs, backward):
        self.output = output
        self.inputs = inputs
        self.backward = backward


class Tape:
    """
    Ordered record of executed operations. Use as a context manager to make
    it the active tape of the calling thread::

        with Tape() as tape:
            loss = ...
        backward(loss)
    """

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self._nodes)

    def record(self, output, inputs, backward):
        output._tape = self
        self._nodes.append(_Node(output, inputs, backward))

    def owns(self, tensor):
        return tensor._tape is self

    def zeroGrad(self):
        """
        Clears the gradient slot of every tensor touched by this tape.
        Parameters are reset to zero rather than cleared.
        """
        for node in self._nodes:
            for t in (node.output,) + tuple(node.inputs):
                if isinstance(t, Parameter):
                    t.zeroGrad()
                else:
                    t.grad = None

    def propagate(self, output, seed):
        """
        Pushes C{seed} (the gradient of some scalar with respect to
        C{output}) back through the tape and accumulates the result into the
        gradient slot of every reachable tensor.
        """
        if output._tape is not self:
            raise ContractError('Tensor was not produced on this tape')
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != output.shape:
            raise DimensionError('propagate', seed.shape, output.shape)

        grads = {id(output): seed}
        tensors = {id(output): output}

        for node in reversed(self._nodes):
            g = grads.get(id(node.output))
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.tracked(self):
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    tensors[key] = inp

        for key, g in grads.items():
            t = tensors[key]
            t.grad = np.array(g) if t.grad is None else t.grad + g


def backward(loss):
    """
    Fills the gradient slots of every tensor and parameter reachable from
    C{loss} with d(loss)/d(tensor).

    @type loss: L{DenseTensor}
    @param loss: single element tensor produced on an active tape
    """
    if loss.values.size != 1:
        raise ContractError(
            f'backward() requires a scalar loss, got shape {loss.shape}')
    if loss._tape is None:
        raise ContractError('Loss was not produced on a tape')
    loss._tape.propagate(loss, np.ones_like(loss.values))


def recordOperation(out, inputs, backward):
    tape = currentTape()
    if tape is not None and any(t.tracked(tape) for t in inputs):
        tape.record(out, tuple(inputs), backward)
    return out


def _require2d(what, *tensors):
    for t in tensors:
        if t.values.ndim != 2:
            raise DimensionError(what + ' (2-D required)', t.shape, ('m', 'n'))


# ------------------------------------------------------------------------
#                            Operations
#

def matmul(a, b):
    _require2d('matmul', a, b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError('matmul', a.shape, b.shape)
    av, bv = a.values, b.values
    out = DenseTensor(av @ bv)
    return recordOperation(out, (a, b), lambda g: (g @ bv.T, av.T @ g))


def rowSoftmax(a, scale=1.0):
    """
    Row-wise softmax of C{a / scale}, computed with max subtraction
    """
    _require2d('rowSoftmax', a)
    if scale <= 0:
        raise ContractError('rowSoftmax scale must be positive')
    z = a.values / scale
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    out = DenseTensor(s)

    def back(g):
        gz = s * (g - (g * s).sum(axis=1, keepdims=True))
        return (gz / scale,)

    return recordOperation(out, (a,), back)


def relu(a):
    mask = a.values > 0
    out = DenseTensor(np.where(mask, a.values, 0.0))
    return recordOperation(out, (a,), lambda g: (g * mask,))


def linear(a, weight, bias=None):
    """
    a . weight + bias, with the bias broadcast over rows
    """
    _require2d('linear', a, weight)
    if a.shape[1] != weight.shape[0]:
        raise DimensionError('linear', a.shape, weight.shape)
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError('linear bias', bias.shape, (weight.shape[1],))
    av, wv = a.values, weight.values
    res = av @ wv
    if bias is not None:
        res = res + bias.values
    out = DenseTensor(res)

    def back(g):
        grads = (g @ wv.T, av.T @ g)
        if bias is not None:
            grads += (g.sum(axis=0),)
        return grads

    inputs = (a, weight) if bias is None else (a, weight, bias)
    return recordOperation(out, inputs, back)


def add(a, b):
    if not isinstance(b, DenseTensor):
        c = float(b)
        return recordOperation(DenseTensor(a.values + c), (a,), lambda g: (g,))
    if a.shape != b.shape:
        raise DimensionError('add', a.shape, b.shape)
    out = DenseTensor(a.values + b.values)
    return recordOperation(out, (a, b), lambda g: (g, g))


def sub(a, b):
    if not isinstance(b, DenseTensor):
        return add(a, -float(b))
    if a.shape != b.shape:
        raise DimensionError('sub', a.shape, b.shape)
    out = DenseTensor(a.values - b.values)
    return recordOperation(out, (a, b), lambda g: (g, -g))


def mul(a, b):
    if not isinstance(b, DenseTensor):
        c = float(b)
        return recordOperation(DenseTensor(a.values * c), (a,),
                               lambda g: (g * c,))
    if a.shape != b.shape:
        raise DimensionError('mul', a.shape, b.shape)
    av, bv = a.values, b.values
    out = DenseTensor(av * bv)
    return recordOperation(out, (a, b), lambda g: (g * bv, g * av))


def square(a):
    av = a.values
    return recordOperation(DenseTensor(av * av), (a,),
                           lambda g: (2.0 * g * av,))


def sumAll(a):
    shape = a.shape
    out = DenseTensor(np.array(a.values.sum()))
    return recordOperation(out, (a,), lambda g: (np.full(shape, float(g)),))


def meanAll(a):
    n = a.values.size
    if n == 0:
        raise ContractError('meanAll of an empty tensor')
    return mul(sumAll(a), 1.0 / n)


def transpose(a):
    _require2d('transpose', a)
    return recordOperation(DenseTensor(a.values.T.copy()), (a,),
                           lambda g: (g.T,))


def reshape(a, shape):
    old = a.shape
    out = DenseTensor(a.values.reshape(shape))
    return recordOperation(out, (a,), lambda g: (g.reshape(old),))


def concatColumns(a, b):
    _require2d('concatColumns', a, b)
    if a.shape[0] != b.shape[0]:
        raise DimensionError('concatColumns', a.shape, b.shape)
    ca = a.shape[1]
    out = DenseTensor(np.concatenate([a.values, b.values], axis=1))
    return recordOperation(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def gatherRows(a, index):
    """
    Selects rows C{index} (repeats allowed); backward scatter-adds
    """
    index = np.asarray(index, dtype=np.int64)
    shape = a.shape
    out = DenseTensor(a.values[index])

    def back(g):
        ga = np.zeros(shape)
        np.add.at(ga, index, g)
        return (ga,)

    return recordOperation(out, (a,), back)


def selectElement(a, index):
    """
    Single element of C{a} as a scalar tensor
    """
    index = tuple(index)
    shape = a.shape
    out = DenseTensor(np.array(a.values[index]))

    def back(g):
        ga = np.zeros(shape)
        ga[index] = float(g)
        return (ga,)

    return recordOperation(out, (a,), back)


def rowNorms(a, eps=1e-12):
    """
    Euclidean norm of every row. The subgradient at a zero row is zero.
    """
    _require2d('rowNorms', a)
    av = a.values
    n = np.sqrt((av * av).sum(axis=1))
    out = DenseTensor(n)

    def back(g):
        safe = np.where(n > eps, n, 1.0)
        return (np.where((n > eps)[:, None], av * (g / safe)[:, None], 0.0),)

    return recordOperation(out, (a,), back)


def rowL2Normalize(a, eps=1e-12):
    _require2d('rowL2Normalize', a)
    av = a.values
    n = np.sqrt((av * av).sum(axis=1, keepdims=True))
    d = np.maximum(n, eps)
    y = av / d
    out = DenseTensor(y)

    def back(g):
        live = n > eps
        proj = g - y * (g * y).sum(axis=1, keepdims=True)
        return (np.where(live, proj, g) / d,)

    return recordOperation(out, (a,), back)


def rowSumNormalize(a, floor=0.0):
    """
    Divides every row of a nonnegative matrix by its sum.

    @param floor: rows summing to less than C{floor} are divided by
                  C{floor} instead, so an all-zero row stays zero. With the
                  default of 0 such rows raise L{NumericError}.
    """
    _require2d('rowSumNormalize', a)
    av = a.values
    s = av.sum(axis=1, keepdims=True)
    if floor > 0:
        floored = s < floor
        s = np.where(floored, floor, s)
    else:
        floored = np.zeros_like(s, dtype=bool)
    if np.any(s <= 0):
        raise NumericError('rowSumNormalize needs strictly positive row sums')
    y = av / s
    out = DenseTensor(y)

    def back(g):
        shared = np.where(floored, 0.0, (g * y).sum(axis=1, keepdims=True))
        return ((g - shared) / s,)

    return recordOperation(out, (a,), back)


def rowScale(a, gain, bias, eps=1e-5):
    """
    Per-row feature scaling: every row is centered and scaled to unit
    variance across its channels, then mapped through a learned per-channel
    gain and bias
    """
    _require2d('rowScale', a)
    c = a.shape[1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError('rowScale', gain.shape, (c,))
    av = a.values
    xc = av - av.mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gain.values
    out = DenseTensor(xhat * gv + bias.values)

    def back(g):
        gx = g * gv
        ga = inv * (
            gx
            - gx.mean(axis=1, keepdims=True)
            - xhat * (gx * xhat).mean(axis=1, keepdims=True)
        )
        return ga, (g * xhat).sum(axis=0), g.sum(axis=0)

    return recordOperation(out, (a, gain, bias), back)


# ------------------------------------------------------------------------
#                        Finite difference oracle
#

class GradientCheckReport:
    """
    Outcome of L{finiteDiffCheck}

    @ivar maxRelativeError: max |analytic - numeric| divided by the largest
                            gradient magnitude of either estimate
    """

    def __init__(self, analytic, numeric):
        self.analytic = analytic
        self.numeric = numeric
        diff = np.max(np.abs(analytic - numeric)) if analytic.size else 0.0
        scale = max(
            np.max(np.abs(analytic)) if analytic.size else 0.0,
            np.max(np.abs(numeric)) if numeric.size else 0.0,
            1e-300,
        )
        self.maxRelativeError = float(diff / scale) if diff else 0.0

    def __repr__(self):
        return f'GradientCheckReport(maxRelativeError={self.maxRelativeError})'


def _projection(shape, seed):
    return np.random.default_rng(seed).standard_normal(shape)


def finiteDiffCheck(f, x, eps=1e-5, seed=0):
    """
    Compares the tape gradient of C{f} at C{x} with central differences.

    Non-scalar outputs are reduced to a scalar by a fixed seeded random
    projection. C{x} is perturbed in place, so a L{Parameter} that C{f}
    reads through a closure may be checked by passing it as C{x}.

    @type f: callable taking and returning L{DenseTensor}
    @rtype: L{GradientCheckReport}
    """
    x.values = np.ascontiguousarray(x.values)
    wasTracked = x.requiresGrad
    savedGrad = x.grad
    x.requiresGrad = True
    x.grad = None
    try:
        with Tape():
            y = f(x)
            proj = None
            if y.values.size == 1:
                loss = sumAll(y)
            else:
                proj = _projection(y.shape, seed)
                loss = sumAll(mul(y, DenseTensor(proj)))
        backward(loss)
        analytic = np.zeros_like(x.values) if x.grad is None else x.grad.copy()
    finally:
        x.requiresGrad = wasTracked
        x.grad = savedGrad

    def scalar():
        with noGrad():
            v = f(x).values
        return float(v.sum()) if proj is None else float((v * proj).sum())

    numeric = np.zeros_like(x.values)
    flat = x.values.reshape(-1)
    nflat = numeric.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        fp = scalar()
        flat[k] = orig - eps
        fm = scalar()
        flat[k] = orig
        nflat[k] = (fp - fm) / (2.0 * eps)

    return GradientCheckReport(analytic, numeric)
