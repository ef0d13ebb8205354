"""The tiny fully convolutional segmentation network.

Three conv layers (3x3 -> 16, 3x3 -> 16, 1x1 -> classes) with a
batch-norm + relu block after each of the first two convs. Small enough
for exhaustive finite-difference checks, big enough to carry two
batch-norm layers with independently mixed statistics.
"""

import hashlib
import json
import struct

import numpy as np

from . import tensor as T
from .seeding import rng_for

BN_EPS = 1e-5
HIDDEN_CHANNELS = 16

CHECKPOINT_MAGIC = b"OASIS-CKPT-v1\n"


class NonFiniteActivation(FloatingPointError):
    """Raised when a forward pass produces NaN/Inf; carries the layer index."""

    def __init__(self, layer_index, stage):
        self.layer_index = layer_index
        super().__init__(f"non-finite activations at layer {layer_index} ({stage})")


class BatchNormLayer:
    """Per-channel affine normalization with stored running statistics."""

    def __init__(self, channels, dtype):
        self.gamma = T.Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = T.Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = BN_EPS


class ConvLayer:
    def __init__(self, weight, bias, padding):
        self.weight = T.Tensor(weight, requires_grad=True)
        self.bias = T.Tensor(bias, requires_grad=True)
        self.padding = padding


class ModelState:
    """Full parameter set, BN running statistics and a snapshot label."""

    def __init__(self, conv1, bn1, conv2, bn2, head, classes, init_seed, snapshot_id="init"):
        self.conv1 = conv1
        self.bn1 = bn1
        self.conv2 = conv2
        self.bn2 = bn2
        self.head = head
        self.classes = classes
        self.init_seed = init_seed
        self.snapshot_id = snapshot_id

    @property
    def dtype(self):
        return self.conv1.weight.dtype

    def bn_layers(self):
        return (self.bn1, self.bn2)

    def named_parameters(self, scope="all"):
        if scope == "bn_affine_only":
            yield "bn1.gamma", self.bn1.gamma
            yield "bn1.beta", self.bn1.beta
            yield "bn2.gamma", self.bn2.gamma
            yield "bn2.beta", self.bn2.beta
            return
        if scope != "all":
            raise ValueError(f"unknown parameter scope {scope!r}")
        yield "conv1.weight", self.conv1.weight
        yield "conv1.bias", self.conv1.bias
        yield "bn1.gamma", self.bn1.gamma
        yield "bn1.beta", self.bn1.beta
        yield "conv2.weight", self.conv2.weight
        yield "conv2.bias", self.conv2.bias
        yield "bn2.gamma", self.bn2.gamma
        yield "bn2.beta", self.bn2.beta
        yield "head.weight", self.head.weight
        yield "head.bias", self.head.bias

    def parameters(self, scope="all"):
        for _, p in self.named_parameters(scope):
            yield p

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def set_param_grads(self, scope):
        """Enable gradients for exactly the given scope (backward skips the rest)."""
        in_scope = {name for name, _ in self.named_parameters(scope)}
        for name, p in self.named_parameters():
            p.requires_grad = name in in_scope

    def named_arrays(self):
        """Every array defining the state, parameters and statistics alike."""
        for name, p in self.named_parameters():
            yield name, p.data
        yield "bn1.running_mean", self.bn1.running_mean
        yield "bn1.running_var", self.bn1.running_var
        yield "bn2.running_mean", self.bn2.running_mean
        yield "bn2.running_var", self.bn2.running_var


def param_count(classes, hidden=HIDDEN_CHANNELS):
    """Parameter count as a pure function of class count and width."""
    conv1 = hidden * 3 * 3 * 3 + hidden
    bn = 2 * hidden
    conv2 = hidden * hidden * 3 * 3 + hidden
    head = classes * hidden + classes
    return conv1 + bn + conv2 + bn + head


def init_model(classes, seed, dtype=np.float64):
    """He fan-in init for convs; identity batch-norm; seeded PRNG."""
    rng = rng_for(seed, "model-init")

    def he(shape):
        fan_in = int(np.prod(shape[1:]))
        return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)

    conv1 = ConvLayer(he((HIDDEN_CHANNELS, 3, 3, 3)), np.zeros(HIDDEN_CHANNELS, dtype=dtype), padding=1)
    conv2 = ConvLayer(he((HIDDEN_CHANNELS, HIDDEN_CHANNELS, 3, 3)), np.zeros(HIDDEN_CHANNELS, dtype=dtype), padding=1)
    head = ConvLayer(he((classes, HIDDEN_CHANNELS, 1, 1)), np.zeros(classes, dtype=dtype), padding=0)
    return ModelState(conv1, BatchNormLayer(HIDDEN_CHANNELS, dtype),
                      conv2, BatchNormLayer(HIDDEN_CHANNELS, dtype),
                      head, classes, init_seed=seed)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def mix_stats(mean, var, sample_mean, sample_var, momentum):
    """Convex mixing of stored statistics toward the sample's, in place."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"bn momentum must lie in [0,1], got {momentum}")
    mean *= (1.0 - momentum)
    mean += momentum * sample_mean
    var *= (1.0 - momentum)
    var += momentum * sample_var


def _spatial_stats(act):
    """Per-channel mean and biased variance over batch and spatial axes."""
    mean = act.mean(axis=(0, 2, 3))
    var = act.var(axis=(0, 2, 3))  # biased: divide by N
    return mean, var


def _bn_apply(act, bn, mode, momentum, tape):
    if mode == "use_running":
        mean, var = bn.running_mean, bn.running_var
    elif mode == "mix":
        sample_mean, sample_var = _spatial_stats(act.data)
        mix_stats(bn.running_mean, bn.running_var, sample_mean, sample_var, momentum)
        mean, var = bn.running_mean, bn.running_var
    elif mode == "batch_only":
        mean, var = _spatial_stats(act.data)
    else:
        raise ValueError(f"unknown bn mode {mode!r}")
    return T.batchnorm_affine(act, bn.gamma, bn.beta, mean, var, bn.eps, tape=tape)


def _check_finite(arr, layer_index, stage):
    if not np.isfinite(arr).all():
        raise NonFiniteActivation(layer_index, stage)


def forward(model, image, bn_mode="use_running", bn_momentum=None, tape=None, trace=None):
    """Image (H,W,3 in [0,1]) -> per-pixel class distribution Tensor (C,H,W).

    bn_mode "mix" first folds this image's per-channel statistics into the
    stored ones (mutating the model) and then normalizes with the result.
    A `trace` dict, when given, receives the post-normalization activations.
    """
    if bn_mode == "mix" and bn_momentum is None:
        raise ValueError("bn_mode='mix' requires bn_momentum")
    x = T.Tensor(np.ascontiguousarray(image.transpose(2, 0, 1)[None], dtype=model.dtype))

    a1 = T.conv2d(x, model.conv1.weight, model.conv1.bias, model.conv1.padding, tape=tape)
    _check_finite(a1.data, 0, "conv")
    n1 = _bn_apply(a1, model.bn1, bn_mode, bn_momentum, tape)
    h1 = T.relu(n1, tape=tape)

    a2 = T.conv2d(h1, model.conv2.weight, model.conv2.bias, model.conv2.padding, tape=tape)
    _check_finite(a2.data, 1, "conv")
    n2 = _bn_apply(a2, model.bn2, bn_mode, bn_momentum, tape)
    h2 = T.relu(n2, tape=tape)

    logits = T.conv2d(h2, model.head.weight, model.head.bias, model.head.padding, tape=tape)
    _check_finite(logits.data, 2, "conv")
    if trace is not None:
        trace.update(pre_bn1=a1.data, post_bn1=n1.data, pre_bn2=a2.data, post_bn2=n2.data)
    probs = T.softmax_channels(logits, tape=tape)
    return T.reshape(probs, probs.data.shape[1:], tape=tape)


def predict(model, image, bn_mode="use_running", bn_momentum=None):
    """Forward without gradient bookkeeping; returns a plain (C,H,W) array."""
    return forward(model, image, bn_mode, bn_momentum).data


def update_bn_stats(model, image, momentum):
    """Fold one image's per-layer statistics into the running ones."""
    forward(model, image, bn_mode="mix", bn_momentum=momentum)


def block_features(model, image):
    """Spatially pooled second-block activations; the style/NN descriptor."""
    x = T.Tensor(np.ascontiguousarray(image.transpose(2, 0, 1)[None], dtype=model.dtype))
    a1 = T.conv2d(x, model.conv1.weight, model.conv1.bias, model.conv1.padding)
    h1 = T.relu(_bn_apply(a1, model.bn1, "use_running", None, None))
    a2 = T.conv2d(h1, model.conv2.weight, model.conv2.bias, model.conv2.padding)
    h2 = T.relu(_bn_apply(a2, model.bn2, "use_running", None, None))
    return h2.data.mean(axis=(0, 2, 3))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class OptimizerConfig:
    def __init__(self, learning_rate, sgd_momentum=0.0, weight_decay=0.0, param_scope="all"):
        if learning_rate < 0:
            raise ValueError("learning rate must be >= 0")
        if weight_decay < 0:
            raise ValueError("weight decay must be >= 0")
        self.learning_rate = learning_rate
        self.sgd_momentum = sgd_momentum
        self.weight_decay = weight_decay
        self.param_scope = param_scope


class SGD:
    """Momentum SGD with decoupled L2 decay over a parameter scope.

    v <- m*v + g ; p <- p - lr*v - lr*wd*p
    """

    def __init__(self, cfg):
        self.cfg = cfg
        self._velocity = {}

    def step(self, model):
        cfg = self.cfg
        for name, p in model.named_parameters(cfg.param_scope):
            if p.grad is None:
                raise RuntimeError(f"sgd_step: parameter {name} has no gradient")
            if cfg.sgd_momentum != 0.0:
                v = self._velocity.get(name)
                if v is None:
                    v = np.zeros_like(p.data)
                    self._velocity[name] = v
                v *= cfg.sgd_momentum
                v += p.grad
                update = v
            else:
                update = p.grad
            p.data -= cfg.learning_rate * update
            if cfg.weight_decay:
                p.data -= cfg.learning_rate * cfg.weight_decay * p.data
            if not np.isfinite(p.data).all():
                raise FloatingPointError(f"non-finite parameter after sgd step: {name}")


def sgd_step(model, cfg, optimizer=None):
    """One update; pass an SGD instance to carry momentum across calls."""
    (optimizer or SGD(cfg)).step(model)


# ---------------------------------------------------------------------------
# snapshot / restore / checkpoint io
# ---------------------------------------------------------------------------

def snapshot(model, snapshot_id=None):
    """Deep copy; restore(snapshot(m)) round-trips bit-identically."""
    copy = init_model(model.classes, model.init_seed, dtype=model.dtype)
    restore(copy, model)
    copy.snapshot_id = model.snapshot_id if snapshot_id is None else snapshot_id
    return copy


def restore(model, source):
    """Overwrite model arrays in place from source."""
    src = dict(source.named_arrays())
    for name, arr in model.named_arrays():
        if arr.shape != src[name].shape:
            raise ValueError(f"restore shape mismatch at {name}: {arr.shape} vs {src[name].shape}")
        np.copyto(arr, src[name])
    model.snapshot_id = source.snapshot_id


def states_equal(a, b):
    return all(np.array_equal(arr, dict(b.named_arrays())[name]) for name, arr in a.named_arrays())


def save_checkpoint(model, path, extra_meta=None):
    """Deterministic binary container: JSON header + raw array payload."""
    names, arrays = zip(*model.named_arrays())
    header = {
        "format": 1,
        "classes": model.classes,
        "init_seed": model.init_seed,
        "snapshot_id": model.snapshot_id,
        "dtype": str(np.dtype(model.dtype)),
        "arrays": [{"name": n, "shape": list(a.shape), "dtype": str(a.dtype)} for n, a in zip(names, arrays)],
        "meta": extra_meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a).tobytes())


def load_checkpoint(path):
    """Inverse of save_checkpoint; returns (ModelState, meta dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        model = init_model(header["classes"], header["init_seed"], dtype=np.dtype(header["dtype"]))
        model.snapshot_id = header["snapshot_id"]
        arrays = dict(model.named_arrays())
        for spec in header["arrays"]:
            arr = arrays[spec["name"]]
            raw = fh.read(arr.nbytes)
            np.copyto(arr, np.frombuffer(raw, dtype=np.dtype(spec["dtype"])).reshape(spec["shape"]))
    return model, header["meta"]


def state_digest(model):
    """Stable content hash over every array; used in provenance lines."""
    h = hashlib.sha256()
    for name, arr in model.named_arrays():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:16]
