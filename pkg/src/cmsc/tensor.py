"""Reverse-mode automatic differentiation over numpy arrays.

Implements exactly the operation set the boundary prediction model needs:
3x3 same-padded convolution, 2x2 max/average pooling, 2x2 nearest-neighbor
upsampling, ReLU, a tanh-based [0,1] output activation, channel
concatenation, spatial cropping and mean squared error. Image tensors are
laid out (batch, channels, height, width), float32 by default; float64
inputs propagate through every op unchanged, which is what the finite
difference gradient checker relies on.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when an operation receives tensors of incompatible shape."""


class Tensor:
    """A node in the forward computation graph.

    Leaf tensors hold data (and a grad buffer if ``requires_grad``);
    interior nodes additionally record their parents and a closure that
    routes the incoming gradient to them.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float32) if not isinstance(data, np.ndarray) else data
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.ndim != 0 and self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if self._backward is None and not self._parents and not self.requires_grad:
            raise RuntimeError("backward called on a tensor with no recorded forward graph")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.data.shape)}, dtype={self.data.dtype}, grad={'set' if self.grad is not None else 'none'})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward_fn
    return out


def _im2col3(xpad):
    """(B,C,H+2,W+2) zero-padded input -> (B*H*W, C*9) patch matrix."""
    b, c, hp, wp = xpad.shape
    h, w = hp - 2, wp - 2
    win = sliding_window_view(xpad, (3, 3), axis=(2, 3))      # (B,C,H,W,3,3)
    col = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * 9)
    return np.ascontiguousarray(col)


def _corr3x3(x, w):
    """Plain (non-differentiating) same-padded 3x3 correlation.

    x: (B,C,H,W), w: (O,C,3,3) -> (B,O,H,W). Shared by the forward pass
    and by the input-gradient computation (which is itself a correlation
    with the spatially flipped, channel-transposed kernel).
    """
    b, c, h, wd = x.shape
    o = w.shape[0]
    xpad = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    col = _im2col3(xpad)
    out = col @ np.ascontiguousarray(w.reshape(o, c * 9).T)
    return out.reshape(b, h, wd, o).transpose(0, 3, 1, 2)


def conv2d_same(x, weight, bias):
    """3x3 convolution preserving spatial size via one pixel of zero padding."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d_same expects (B,C,H,W) input, got {x.shape}")
    o, cin, kh, kw = weight.shape
    if (kh, kw) != (3, 3):
        raise ShapeError(f"conv2d_same kernels must be 3x3, got {kh}x{kw}")
    if x.shape[1] != cin:
        raise ShapeError(f"input has {x.shape[1]} channels, weight expects {cin}")
    if bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} does not match {o} output channels")

    y = _corr3x3(x.data, weight.data)
    y += bias.data[None, :, None, None]

    def backward(g):
        b, _, h, w = x.shape
        if weight.requires_grad:
            xpad = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
            col = _im2col3(xpad)                                   # (BHW, C*9)
            gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1).reshape(b * h * w, o))
            weight._accumulate((gm.T @ col).reshape(weight.shape))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            wt = np.ascontiguousarray(weight.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
            x._accumulate(_corr3x3(g, wt))

    return _node(y, (x, weight, bias), backward)


def maxpool2(x):
    """2x2 max pooling; ties route the gradient to the first window cell in row-major order."""
    x = _as_tensor(x)
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        if x.requires_grad:
            gw = np.zeros_like(win)
            np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
            x._accumulate(gw.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w))

    out = _node(y, (x,), backward)
    return out, idx


def avgpool2(x):
    """2x2 average pooling (used for the input/target image pyramids)."""
    x = _as_tensor(x)
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2 needs even spatial dims, got {h}x{w}")
    y = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        if x.requires_grad:
            gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * np.asarray(0.25, dtype=g.dtype)
            x._accumulate(gx)

    return _node(y, (x,), backward)


def upsample2(x):
    """Nearest-neighbor 2x upsampling; each pixel fills a 2x2 block."""
    x = _as_tensor(x)
    y = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        if x.requires_grad:
            b, c, h2, w2 = g.shape
            x._accumulate(g.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)))

    return _node(y, (x,), backward)


def relu(x):
    x = _as_tensor(x)
    y = np.maximum(x.data, 0)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * (x.data > 0))

    return _node(y, (x,), backward)


def bounded_out(x):
    """Map reals to [0,1] via (tanh(x)+1)/2; monotone and saturating."""
    x = _as_tensor(x)
    t = np.tanh(x.data)
    y = (t + 1) * np.asarray(0.5, dtype=t.dtype)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * ((1 - t * t) * np.asarray(0.5, dtype=t.dtype)))

    return _node(y, (x,), backward)


def concat_channels(parts):
    """Concatenate (B,C,H,W) tensors along the channel axis."""
    parts = [_as_tensor(p) for p in parts]
    y = np.concatenate([p.data for p in parts], axis=1)
    splits = [p.shape[1] for p in parts]

    def backward(g):
        start = 0
        for p, c in zip(parts, splits):
            if p.requires_grad:
                p._accumulate(g[:, start:start + c])
            start += c

    return _node(y, tuple(parts), backward)


def crop(x, top, left, height, width):
    """Spatial slice [top:top+height, left:left+width]; backward zero-pads."""
    x = _as_tensor(x)
    b, c, h, w = x.shape
    if not (0 <= top and top + height <= h and 0 <= left and left + width <= w):
        raise ShapeError(f"crop window {height}x{width}@({top},{left}) outside {h}x{w}")
    y = x.data[:, :, top:top + height, left:left + width]

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[:, :, top:top + height, left:left + width] = g
            x._accumulate(gx)

    return _node(y.copy(), (x,), backward)


def crop_center(x, size):
    """Central size x size spatial crop."""
    _, _, h, w = _as_tensor(x).shape
    return crop(x, (h - size) // 2, (w - size) // 2, size, size)


def mse_loss(pred, target):
    """Mean over all elements of the squared difference."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    y = np.asarray((diff * diff).mean(), dtype=pred.dtype)

    def backward(g):
        scale = g * np.asarray(2.0 / diff.size, dtype=diff.dtype)
        if pred.requires_grad:
            pred._accumulate(scale * diff)
        if target.requires_grad:
            target._accumulate(-scale * diff)

    return _node(y, (pred, target), backward)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    y = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _node(y, (a, b), backward)


class Adam:
    """ADAM with bias correction; epsilon sits outside the square root."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            p.data -= (self.lr / b1t) * m / (np.sqrt(v / b2t) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


def grad_check(fn, inputs, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps the input tensors to a scalar Tensor. Inputs must be
    float64; the relative error at each coordinate is |a-n|/max(1,|a|,|n|)
    and the maximum over every coordinate of every input is returned.
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        t.requires_grad = True
        t.zero_grad()
    loss = fn(*inputs)
    if not np.isfinite(loss.data):
        raise ValueError("grad_check: non-finite loss")
    loss.backward()
    # snapshot now: re-evaluating fn below may reset the grad buffers
    analytic_grads = [
        np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs
    ]
    worst = 0.0
    for t, analytic in zip(inputs, analytic_grads):
        flat = t.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn(*inputs).data)
            flat[i] = orig - h
            fm = float(fn(*inputs).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise ValueError("grad_check: non-finite perturbed loss")
            num = (fp - fm) / (2 * h)
            a = aflat[i]
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            if err > worst:
                worst = err
    return worst


class SeededRng:
    """Deterministic random stream (Philox) with splitting.

    The same seed produces the same stream on every platform. ``split``
    derives independent child streams; child i of a given parent is always
    the same stream, so work can be farmed out by index reproducibly.
    """

    def __init__(self, seed, _seq=None):
        self.seq = _seq if _seq is not None else np.random.SeedSequence(seed)
        self.gen = np.random.Generator(np.random.Philox(self.seq))

    def split(self, n):
        return [SeededRng(None, _seq=child) for child in self.seq.spawn(n)]

    def uniform(self, low, high, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high_inclusive, size=None):
        return self.gen.integers(low, high_inclusive, size=size, endpoint=True)

    def choice(self, options):
        return options[int(self.gen.integers(0, len(options)))]

    def shuffle(self, seq):
        self.gen.shuffle(seq)
