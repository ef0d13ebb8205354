"""The per-frame adaptation strategy zoo.

Every strategy is driven through `adapt_step(state, frame, frame_index)`,
which returns the per-pixel class distribution used for the frame's
prediction and mutates the state according to the strategy family:

  naive (N-)     adapt a fresh copy of the pre-trained model, predict, discard
  continual (C-) keep adapting the same model frame after frame
  -SR            add a supervised cross-entropy term on stored source frames
  Class-R-/Oracle-R-  continual, but overwrite with the pre-trained weights
                 before adapting whenever a tracked signal crosses its
                 threshold (predicted-class-count gap, or the ground-truth
                 mIoU gap for the oracle)
"""

from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from . import model as M
from . import tensor as T
from .metrics import count_classes, frame_miou
from .seeding import rng_for

TENT_KINDS = ("N_TENT", "C_TENT", "C_TENT_SR", "CLASS_R_TENT", "ORACLE_R_TENT")
PL_KINDS = ("N_PL", "C_PL", "C_PL_SR", "CLASS_R_PL", "ORACLE_R_PL")
BN_KINDS = ("N_BN", "C_BN")
ST_KINDS = ("N_ST_RANDOM", "N_ST_NN")
ALL_KINDS = ("NA",) + BN_KINDS + TENT_KINDS + PL_KINDS + ST_KINDS

RESET_KINDS = ("CLASS_R_TENT", "CLASS_R_PL", "ORACLE_R_TENT", "ORACLE_R_PL")
SR_KINDS = ("C_TENT_SR", "C_PL_SR")
NAIVE_KINDS = ("NA", "N_BN", "N_TENT", "N_PL", "N_ST_RANDOM", "N_ST_NN")

DISPLAY_NAMES = {
    "NA": "NA", "N_BN": "N-BN", "C_BN": "C-BN",
    "N_TENT": "N-TENT", "C_TENT": "C-TENT", "C_TENT_SR": "C-TENT-SR",
    "CLASS_R_TENT": "Class-R-TENT", "ORACLE_R_TENT": "Oracle-R-TENT",
    "N_PL": "N-PL", "C_PL": "C-PL", "C_PL_SR": "C-PL-SR",
    "CLASS_R_PL": "Class-R-PL", "ORACLE_R_PL": "Oracle-R-PL",
    "N_ST_RANDOM": "N-ST (random)", "N_ST_NN": "N-ST (NN)",
}

# per-strategy defaults: learning rate, BN momentum, source-regularizer
# weight, reset window/threshold
DEFAULTS = {
    "NA": {},
    "N_BN": {"bn_momentum": 0.1},
    "C_BN": {"bn_momentum": 0.1},
    "N_TENT": {"eta": 1.0},
    "C_TENT": {"eta": 0.01},
    "C_TENT_SR": {"eta": 0.01, "sr_weight": 1.0},
    "CLASS_R_TENT": {"eta": 0.1, "reset_window": 1, "reset_threshold": 1.0},
    "ORACLE_R_TENT": {"eta": 1.0},
    "N_PL": {"eta": 1e-4},
    "C_PL": {"eta": 1e-4},
    "C_PL_SR": {"eta": 1e-4, "sr_weight": 2.0},
    "CLASS_R_PL": {"eta": 1e-4, "reset_window": 1, "reset_threshold": 1.0},
    "ORACLE_R_PL": {"eta": 1e-4},
    "N_ST_RANDOM": {},
    "N_ST_NN": {},
}


@dataclass(frozen=True)
class StrategyConfig:
    kind: str
    eta: float = 0.0
    adapt_iters: int = 1
    bn_momentum: float = 0.1
    sr_weight: float = 1.0
    sr_batch: int = 1
    reset_window: int = 1
    reset_threshold: float = 1.0

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if self.adapt_iters < 1:
            raise ValueError("adapt_iters must be >= 1")

    @property
    def display_name(self):
        return DISPLAY_NAMES[self.kind]

    @property
    def config_id(self):
        # must stay comma-free: it is a single CSV field in frame records
        bits = [self.kind]
        if self.kind in TENT_KINDS + PL_KINDS:
            bits.append(f"eta={self.eta:g}")
            if self.adapt_iters != 1:
                bits.append(f"iters={self.adapt_iters}")
        if self.kind in BN_KINDS:
            bits.append(f"alpha={self.bn_momentum:g}")
        if self.kind in SR_KINDS:
            bits.append(f"sr={self.sr_weight:g}")
        if self.kind.startswith("CLASS_R"):
            bits.append(f"K={self.reset_window}")
            bits.append(f"psi={self.reset_threshold:g}")
        return bits[0] if len(bits) == 1 else f"{bits[0]}({';'.join(bits[1:])})"


def default_config(kind, **overrides):
    params = dict(DEFAULTS[kind])
    params.update(overrides)
    return StrategyConfig(kind=kind, **params)


class StrategyError(RuntimeError):
    """A strategy failed on a frame; the episode runner aborts and flags it."""


# ---------------------------------------------------------------------------
# losses (thin, name-level wrappers over the tensor primitives)
# ---------------------------------------------------------------------------

def entropy_loss(probs, tape=None):
    """Summed prediction entropy of a (C,H,W) probability map."""
    if not isinstance(probs, T.Tensor):
        probs = T.Tensor(probs)
    return T.entropy_sum(probs, tape=tape)


def pseudo_label(probs):
    """Per-pixel argmax labels; ties resolve to the lowest class index."""
    data = probs.data if isinstance(probs, T.Tensor) else probs
    return data.argmax(axis=0)


def pl_loss(probs, mask, tape=None):
    """Mean per-pixel cross-entropy of the map against an integer mask."""
    if not isinstance(probs, T.Tensor):
        probs = T.Tensor(probs)
    return T.cross_entropy_mean(probs, mask, tape=tape)


# ---------------------------------------------------------------------------
# source memory (regularization and style transfer)
# ---------------------------------------------------------------------------

class SourceMemory:
    """Held-out labeled source frames plus pooled descriptors for NN lookup."""

    def __init__(self, frames, feature_model=None):
        if not frames:
            raise ValueError("source memory must not be empty")
        self.frames = list(frames)
        self.features = None
        if feature_model is not None:
            feats = np.stack([M.block_features(feature_model, f.image) for f in self.frames])
            norms = np.linalg.norm(feats, axis=1, keepdims=True)
            self.features = feats / np.maximum(norms, 1e-12)

    def __len__(self):
        return len(self.frames)


def style_match(image, memory, mode, rng, feature_model=None):
    """Re-color the frame so each channel matches a chosen source frame's stats.

    mode "random" picks the style frame uniformly; "nn" picks the stored
    frame whose pooled features are most cosine-similar to the content's.
    """
    if memory is None or len(memory) == 0:
        raise StrategyError("style transfer needs a non-empty source memory")
    if mode == "random":
        idx = int(rng.integers(0, len(memory)))
    elif mode == "nn":
        if memory.features is None or feature_model is None:
            raise StrategyError("nn style selection needs precomputed source features")
        feat = M.block_features(feature_model, image)
        feat = feat / max(np.linalg.norm(feat), 1e-12)
        idx = int(np.argmax(memory.features @ feat))
    else:
        raise ValueError(f"unknown style mode {mode!r}")
    style = memory.frames[idx].image
    axes = (0, 1)
    c_mean, c_std = image.mean(axes), image.std(axes)
    s_mean, s_std = style.mean(axes), style.std(axes)
    out = (image - c_mean) / (c_std + 1e-8) * s_std + s_mean
    return np.clip(out, 0.0, 1.0), idx


# ---------------------------------------------------------------------------
# adaptation state and the uniform step interface
# ---------------------------------------------------------------------------

class AdaptState:
    """Per-episode state: the frozen pre-trained model, the current model,
    the reset window, and optional source memory."""

    def __init__(self, theta0, cfg, seed, source=None, theta0_reference=None):
        self.theta0 = theta0
        self.cfg = cfg
        self.seed = seed
        self.current = M.snapshot(theta0, snapshot_id="adapted")
        self._scratch = M.snapshot(theta0, snapshot_id="scratch")
        self.source = source
        self.window = deque(maxlen=cfg.reset_window + 1)
        self.theta0_reference = theta0_reference  # optional (ncl0, miou0) per frame
        self.diagnostics = {}
        self.reset_count = 0


def init_adapt_state(theta0, cfg, seed, source=None, theta0_reference=None):
    if cfg.kind in SR_KINDS + ST_KINDS and source is None:
        raise ValueError(f"{cfg.kind} requires a source memory")
    return AdaptState(theta0, cfg, seed, source, theta0_reference)


def _theta0_frame_stats(state, frame, frame_index, need_miou):
    ref = state.theta0_reference
    if ref is not None and frame_index < len(ref):
        return ref[frame_index]
    pred0 = pseudo_label(M.predict(state.theta0, frame.image))
    miou0 = None
    if need_miou:
        miou0 = frame_miou(pred0, frame.mask, state.theta0.classes)
    return count_classes(pred0), miou0


def reset_check(state, frame, frame_index):
    """Decide (and apply) a reset before this frame's adaptation.

    Class-R compares predicted-class counts of the pre-trained and current
    models over a rolling window that includes this frame; Oracle-R
    compares ground-truth mIoU on this frame alone and resets on any
    regression.
    """
    cfg = state.cfg
    if cfg.kind.startswith("CLASS_R"):
        ncl0, _ = _theta0_frame_stats(state, frame, frame_index, need_miou=False)
        ncl_cur = count_classes(pseudo_label(M.predict(state.current, frame.image)))
        state.window.append((ncl0, ncl_cur))
        psi = sum(a for a, _ in state.window) - sum(b for _, b in state.window)
        fired = psi > cfg.reset_threshold
    elif cfg.kind.startswith("ORACLE_R"):
        if frame.mask is None:
            raise StrategyError("oracle reset requires ground truth for the current frame")
        ncl0, miou0 = _theta0_frame_stats(state, frame, frame_index, need_miou=True)
        miou_cur = frame_miou(pseudo_label(M.predict(state.current, frame.image)),
                              frame.mask, state.theta0.classes)
        psi = miou0 - miou_cur
        fired = psi > 0.0
        state.diagnostics["miou0"] = miou0
        state.diagnostics["miou_cur"] = miou_cur
    else:
        raise ValueError(f"reset_check called for non-reset kind {cfg.kind}")
    state.diagnostics["psi"] = psi
    if fired:
        M.restore(state.current, state.theta0)
        state.reset_count += 1
    return fired


def _gradient_step(state, frame, kind_is_tent, frame_index):
    """Shared TENT/PL adaptation: adapt_iters updates, then predict."""
    cfg = state.cfg
    model = state.current
    scope = "bn_affine_only" if kind_is_tent else "all"
    model.set_param_grads(scope)
    opt = M.OptimizerConfig(learning_rate=cfg.eta, param_scope=scope)
    for it in range(cfg.adapt_iters):
        model.zero_grad()
        tape = T.Tape()
        probs = M.forward(model, frame.image, tape=tape)
        if kind_is_tent:
            loss = T.entropy_sum(probs, tape=tape)
        else:
            loss = T.cross_entropy_mean(probs, pseudo_label(probs), tape=tape)
        if cfg.kind in SR_KINDS:
            rng = rng_for(state.seed, "sr", frame_index, it)
            for pick in rng.integers(0, len(state.source), size=cfg.sr_batch):
                src = state.source.frames[int(pick)]
                src_probs = M.forward(model, src.image, tape=tape)
                src_ce = T.cross_entropy_mean(src_probs, src.mask, tape=tape)
                loss = T.add(loss, T.scale(src_ce, cfg.sr_weight / cfg.sr_batch, tape=tape), tape=tape)
        T.backward(loss, tape)
        M.sgd_step(model, opt)
    return M.predict(model, frame.image)


def adapt_step(state, frame, frame_index=0):
    """Uniform interface: adapt on one unlabeled frame, return its prediction.

    The returned array is the (C,H,W) class distribution computed with the
    post-adaptation model; the state carries whatever the strategy keeps.
    """
    cfg = state.cfg
    kind = cfg.kind
    try:
        if kind == "NA":
            return M.predict(state.theta0, frame.image), state

        if kind == "N_BN":
            M.restore(state._scratch, state.theta0)
            return M.predict(state._scratch, frame.image, bn_mode="mix",
                             bn_momentum=cfg.bn_momentum), state

        if kind == "C_BN":
            return M.predict(state.current, frame.image, bn_mode="mix",
                             bn_momentum=cfg.bn_momentum), state

        if kind in ST_KINDS:
            mode = "random" if kind == "N_ST_RANDOM" else "nn"
            rng = rng_for(state.seed, "style", frame_index)
            stylized, idx = style_match(frame.image, state.source, mode, rng,
                                        feature_model=state.theta0)
            state.diagnostics["style_index"] = idx
            return M.predict(state.theta0, stylized), state

        if kind in TENT_KINDS or kind in PL_KINDS:
            if kind in ("N_TENT", "N_PL"):
                M.restore(state.current, state.theta0)
            elif kind in RESET_KINDS:
                state.diagnostics["reset_fired"] = reset_check(state, frame, frame_index)
            probs = _gradient_step(state, frame, kind in TENT_KINDS, frame_index)
            return probs, state

        raise ValueError(f"unhandled strategy kind {kind!r}")
    except (FloatingPointError, ValueError, RuntimeError) as exc:
        if isinstance(exc, StrategyError):
            raise
        raise StrategyError(f"{cfg.config_id} failed: {exc}") from exc
