"""Dense tensors with tape-based reverse-mode gradients.

Deliberately small: only the primitives a per-pixel segmentation network
needs (same-padding conv2d, frozen-statistics batch-norm affine, relu,
channel softmax, entropy / cross-entropy losses, and a few glue ops).
Forward calls without a tape are plain numpy and carry no bookkeeping;
with a tape, each primitive records one closure that is replayed in exact
reverse execution order by `backward`.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOG_CLAMP = 1e-12  # probability floor applied before every logarithm


class Tensor:
    """Contiguous n-d value with an optional same-shape gradient buffer.

    `requires_grad` marks leaves that should accumulate gradients; ops
    propagate it so backward skips every branch no trainable leaf feeds.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, dtype=None, requires_grad=False):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Tape:
    """Ordered record of primitive ops executed during one forward pass."""

    __slots__ = ("_records", "_produced")

    def __init__(self):
        self._records = []      # (out, backward_fn); fn(g) -> [(inp, dinp)]
        self._produced = set()  # ids of tensors produced on this tape

    def record(self, out, backward_fn):
        self._records.append((out, backward_fn))
        self._produced.add(id(out))

    def produced(self, tensor):
        return id(tensor) in self._produced

    def __len__(self):
        return len(self._records)

    def clear(self):
        """Drop gradient bookkeeping; never touches parameter data."""
        self._records.clear()
        self._produced.clear()


def backward(loss, tape):
    """Accumulate d(loss)/d(leaf) into the grad slot of every leaf tensor.

    Intermediate (tape-produced) tensors get transient gradients; leaves —
    parameters and inputs — accumulate, so repeated calls without clearing
    grads sum their contributions.
    """
    if len(tape) == 0:
        raise RuntimeError("backward on an empty tape")
    if not tape.produced(loss):
        raise RuntimeError("loss tensor was not produced on this tape")
    if loss.data.size != 1:
        raise RuntimeError(f"backward requires a scalar loss, got shape {loss.data.shape}")

    flowing = {id(loss): np.ones_like(loss.data)}
    for out, fn in reversed(tape._records):
        g = flowing.pop(id(out), None)
        if g is None:
            continue  # not on the path from the loss
        for inp, dinp in fn(g):
            if tape.produced(inp):
                acc = flowing.get(id(inp))
                flowing[id(inp)] = dinp if acc is None else acc + dinp
            else:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += dinp


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def conv2d(x, weight, bias, padding, tape=None):
    """Same-size cross-correlation: x[B,Cin,H,W] * weight[Cout,Cin,k,k] + bias.

    Requires odd k and padding == (k - 1) // 2.
    """
    xd, wd, bd = x.data, weight.data, bias.data
    if xd.ndim != 4:
        raise ValueError(f"conv2d input must be 4-d [B,Cin,H,W], got {xd.ndim}-d")
    if wd.ndim != 4 or wd.shape[2] != wd.shape[3]:
        raise ValueError(f"conv2d weight must be [Cout,Cin,k,k], got {wd.shape}")
    b_, cin, h, w = xd.shape
    cout, cin_w, k, _ = wd.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input Cin={cin}, weight Cin={cin_w}")
    if bd.shape != (cout,):
        raise ValueError(f"conv2d bias must have shape ({cout},), got {bd.shape}")
    if k % 2 != 1:
        raise ValueError(f"conv2d kernel size must be odd, got k={k}")
    if padding != (k - 1) // 2:
        raise ValueError(f"conv2d padding must be (k-1)//2={ (k - 1) // 2 } for k={k}, got {padding}")

    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xd
    # columns: (Cin*k*k, B*H*W), batch-major columns
    win = sliding_window_view(xp, (k, k), axis=(2, 3))          # (B,Cin,H,W,k,k)
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(cin * k * k, b_ * h * w)
    out_mat = wd.reshape(cout, -1) @ cols + bd[:, None]
    out = Tensor(out_mat.reshape(cout, b_, h, w).transpose(1, 0, 2, 3))

    if tape is not None and (x.requires_grad or weight.requires_grad or bias.requires_grad):
        need_x, need_w, need_b = x.requires_grad, weight.requires_grad, bias.requires_grad

        def bwd(g):
            g_mat = g.transpose(1, 0, 2, 3).reshape(cout, b_ * h * w)
            grads = []
            if need_x:
                dcols = (wd.reshape(cout, -1).T @ g_mat).reshape(cin, k, k, b_, h, w)
                hp, wp = h + 2 * padding, w + 2 * padding
                dxp = np.zeros((cin, b_, hp, wp), dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        dxp[:, :, i:i + h, j:j + w] += dcols[:, i, j]
                dx = dxp[:, :, padding:padding + h, padding:padding + w].transpose(1, 0, 2, 3)
                grads.append((x, dx))
            if need_w:
                grads.append((weight, (g_mat @ cols.T).reshape(wd.shape)))
            if need_b:
                grads.append((bias, g_mat.sum(axis=1)))
            return grads

        out.requires_grad = True
        tape.record(out, bwd)
    return out


def batchnorm_affine(x, gamma, beta, mean, var, eps, tape=None):
    """Per-channel (x - mean) / sqrt(var + eps) * gamma + beta on [B,C,H,W].

    `mean` and `var` are plain arrays treated as constants; gradients flow
    to x, gamma and beta only.
    """
    xd = x.data
    inv = 1.0 / np.sqrt(var + eps)
    scale = (gamma.data * inv).astype(xd.dtype)
    shift = (beta.data - mean * scale).astype(xd.dtype)
    out = Tensor(xd * scale[:, None, None] + shift[:, None, None])

    if tape is not None and (x.requires_grad or gamma.requires_grad or beta.requires_grad):
        need_x, need_g, need_b = x.requires_grad, gamma.requires_grad, beta.requires_grad
        ax = (0, 2, 3) if xd.ndim == 4 else (1, 2)

        def bwd(g):
            grads = []
            if need_x:
                grads.append((x, g * scale[:, None, None]))
            if need_g:
                xhat = (xd - mean[:, None, None].astype(xd.dtype)) * inv[:, None, None].astype(xd.dtype)
                grads.append((gamma, (g * xhat).sum(axis=ax)))
            if need_b:
                grads.append((beta, g.sum(axis=ax)))
            return grads

        out.requires_grad = True
        tape.record(out, bwd)
    return out


def relu(x, tape=None):
    """Elementwise max(0, x); gradient is 0 at exactly 0."""
    out = Tensor(np.maximum(x.data, 0))
    if tape is not None and x.requires_grad:
        def bwd(g):
            return [(x, g * (x.data > 0))]
        out.requires_grad = True
        tape.record(out, bwd)
    return out


def softmax_channels(logits, tape=None, channel_axis=1):
    """Per-pixel distribution over the channel axis, max-subtracted."""
    zd = logits.data
    if zd.shape[channel_axis] < 2:
        raise ValueError(f"softmax needs >= 2 channels, got {zd.shape[channel_axis]}")
    if not np.isfinite(zd).all():
        raise FloatingPointError("non-finite logits passed to softmax")
    z = zd - zd.max(axis=channel_axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=channel_axis, keepdims=True)
    out = Tensor(p)
    if tape is not None and logits.requires_grad:
        def bwd(g):
            dot = (g * p).sum(axis=channel_axis, keepdims=True)
            return [(logits, p * (g - dot))]
        out.requires_grad = True
        tape.record(out, bwd)
    return out


def entropy_sum(probs, tape=None):
    """Total prediction entropy: -sum over every pixel and class of p*log(p).

    Probabilities are floored at LOG_CLAMP before the log.
    """
    pd = probs.data
    pc = np.maximum(pd, LOG_CLAMP)
    logp = np.log(pc)
    out = Tensor(np.asarray(-(pd * logp).sum(), dtype=pd.dtype))
    if tape is not None and probs.requires_grad:
        def bwd(g):
            # d(-p*log(max(p,eps)))/dp = -(log(max(p,eps)) + [p > eps])
            return [(probs, -g * (logp + (pd > LOG_CLAMP)))]
        out.requires_grad = True
        tape.record(out, bwd)
    return out


def cross_entropy_mean(probs, labels, tape=None, class_weights=None):
    """Mean per-pixel negative log-probability of the labelled class.

    probs is [C,H,W] (or [B,C,H,W]); labels an integer mask of matching
    spatial shape. Probabilities are floored at LOG_CLAMP. Optional
    per-class weights produce the weighted mean (sum w*nll / sum w).
    """
    pd = probs.data
    if pd.ndim == 3:
        idx = (labels, *np.indices(labels.shape))
    elif pd.ndim == 4:
        bg, hg, wg = np.indices(labels.shape)
        idx = (bg, labels, hg, wg)
    else:
        raise ValueError(f"cross_entropy_mean expects 3-d or 4-d probs, got {pd.ndim}-d")
    picked = pd[idx]
    pc = np.maximum(picked, LOG_CLAMP)
    if class_weights is None:
        wts, denom = None, picked.size
        total = -np.log(pc).sum()
    else:
        wts = np.asarray(class_weights, dtype=pd.dtype)[labels]
        denom = wts.sum()
        total = -(wts * np.log(pc)).sum()
    out = Tensor(np.asarray(total / denom, dtype=pd.dtype))
    if tape is not None and probs.requires_grad:
        def bwd(g):
            dp = np.zeros_like(pd)
            scale = 1.0 if wts is None else wts
            dp[idx] = -g * scale * (picked > LOG_CLAMP) / (denom * pc)
            return [(probs, dp)]
        out.requires_grad = True
        tape.record(out, bwd)
    return out


def add(a, b, tape=None):
    """Elementwise sum of two same-shape tensors."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data)
    if tape is not None and (a.requires_grad or b.requires_grad):
        need_a, need_b = a.requires_grad, b.requires_grad

        def bwd(g):
            return ([(a, g)] if need_a else []) + ([(b, g)] if need_b else [])

        out.requires_grad = True
        tape.record(out, bwd)
    return out


def scale(a, factor, tape=None):
    """Multiply by a python scalar constant."""
    out = Tensor(a.data * a.data.dtype.type(factor))
    if tape is not None and a.requires_grad:
        def bwd(g):
            return [(a, g * a.data.dtype.type(factor))]
        out.requires_grad = True
        tape.record(out, bwd)
    return out


def sum_all(x, tape=None):
    """Reduce every element to one scalar."""
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype))
    if tape is not None and x.requires_grad:
        def bwd(g):
            return [(x, np.broadcast_to(g, x.data.shape).astype(x.data.dtype))]
        out.requires_grad = True
        tape.record(out, bwd)
    return out


def reshape(x, shape, tape=None):
    out = Tensor(x.data.reshape(shape))
    if tape is not None and x.requires_grad:
        def bwd(g):
            return [(x, g.reshape(x.data.shape))]
        out.requires_grad = True
        tape.record(out, bwd)
    return out
