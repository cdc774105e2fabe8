"""End-to-end training: L1 loss, Adam, step learning-rate schedule.

Every iteration draws its randomness from ``default_rng([seed, iteration])``,
so a run resumed from a checkpoint replays exactly the iterations an
uninterrupted run would have taken.
"""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from dkn import autograd as ag
from dkn.autograd import Tensor, backward
from dkn.errors import ConfigurationError, ContractError, DimensionError, TrainingDivergedError
from dkn.filtering import bicubic_resize, deformable_weighted_average
from dkn.model import RECEPTIVE_FIELD, DknModel
from dkn.parallel import thread_limits

log = logging.getLogger(__name__)

PAD = RECEPTIVE_FIELD // 2


@dataclass
class TrainConfig:
    iterations: int = 40000
    batch_size: int = 1
    lr: float = 1e-3
    decay_every: int = 10000
    decay_factor: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    scale: int = 4
    crop: int = 0  # 0: variant default (DKN 64-pixel output window, FDKN 96x96)
    seed: int = 0
    checkpoint_every: int = 0
    checkpoint_path: str = ""

    def __post_init__(self):
        for name in ("iterations", "batch_size", "decay_every"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.lr <= 0 or self.decay_factor <= 0 or self.eps <= 0:
            raise ConfigurationError("lr, decay_factor and eps must be positive")
        if self.batch_size != 1:
            raise ConfigurationError("only batch size 1 is supported")
        if self.crop < 0 or self.crop % 4:
            raise ConfigurationError("crop must be a non-negative multiple of 4")

    def to_dict(self):
        return asdict(self)


def lr_at(iteration, config):
    """Base rate divided by ``decay_factor`` every ``decay_every`` iterations."""
    if iteration < 0:
        raise ConfigurationError("iteration must be non-negative")
    return config.lr / config.decay_factor ** (iteration // config.decay_every)


def l1_loss(pred, gt):
    """Sum of absolute differences; sign subgradient, 0 at ties."""
    pred = ag.as_tensor(pred)
    gt = ag.as_tensor(gt, like=pred)
    if pred.shape != gt.shape:
        raise DimensionError(f"l1_loss: shape mismatch {pred.shape} vs {gt.shape}")
    diff = pred.data - gt.data
    sign = np.sign(diff)
    ag.record_branch(sign.astype(np.int8))
    out = np.abs(diff).sum(keepdims=True)

    def grad_fn(g):
        return g * sign, -g * sign

    return Tensor.from_op(out, (pred, gt), grad_fn, "l1_loss")


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update of ``params`` in place."""
    missing = [name for name in params if name not in grads]
    if missing:
        raise ContractError(f"no gradient for parameters: {missing}")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return state


# ----------------------------------------------------------------------
# data


def synthesize_pair(scene, scale):
    """``(lr_depth, target_gt, guidance)`` by bicubic downsampling of the depth."""
    h, w = scene.hr_depth.shape[2:]
    if h % scale or w % scale:
        raise DimensionError(f"scene {h}x{w} not divisible by scale {scale}")
    lr = bicubic_resize(scene.hr_depth, h // scale, w // scale)
    return lr, scene.hr_depth, scene.hr_color


class _Sample:
    """Per-scene tensors prepared once for the whole run."""

    def __init__(self, scene, scale, guided):
        lr, gt, guide = synthesize_pair(scene, scale)
        h, w = gt.shape[2:]
        self.gt = gt
        self.target = bicubic_resize(lr, h, w)
        self.guide = guide if guided else None
        pad = ((0, 0), (0, 0), (PAD, PAD), (PAD, PAD))
        self.target_padded = np.pad(self.target, pad, mode="edge")
        self.guide_padded = np.pad(guide, pad, mode="edge") if guided else None


def _dkn_loss(model, sample, rng, crop):
    h, w = sample.gt.shape[2:]
    crop = min(crop, h - h % 4, w - w % 4)
    n = crop // 4
    size = RECEPTIVE_FIELD + 4 * (n - 1)
    # any origin keeping the last lattice row/column inside the scene
    y0 = int(rng.integers(0, h - 4 * (n - 1)))
    x0 = int(rng.integers(0, w - 4 * (n - 1)))
    window = (slice(None), slice(None), slice(y0, y0 + size), slice(x0, x0 + size))
    guide = sample.guide_padded[window] if sample.guide_padded is not None else None
    weights, offsets = model.fields(guide, sample.target_padded[window])
    ys = y0 + 4 * np.arange(n)
    xs = x0 + 4 * np.arange(n)
    pred = deformable_weighted_average(sample.target, weights, offsets, model.config.grid,
                                       model.config.residual, centers=(ys, xs))
    gt = sample.gt[:, :, ys[:, None], xs[None, :]]
    return l1_loss(pred, gt), gt.size


def _fdkn_loss(model, sample, rng, crop):
    h, w = sample.gt.shape[2:]
    crop = min(crop, h - h % 4, w - w % 4)
    y0 = int(rng.integers(0, h - crop + 1))
    x0 = int(rng.integers(0, w - crop + 1))
    window = (slice(None), slice(None), slice(y0, y0 + crop), slice(x0, x0 + crop))
    target = np.ascontiguousarray(sample.target[window])
    guide = np.ascontiguousarray(sample.guide[window]) if sample.guide is not None else None
    weights, offsets = model.fields(guide, target)
    pred = deformable_weighted_average(target, weights, offsets, model.config.grid,
                                       model.config.residual)
    gt = sample.gt[window]
    return l1_loss(pred, gt), gt.size


@dataclass
class TrainResult:
    model: object
    history: list
    state: AdamState
    iteration: int


def default_crop(model):
    return 64 if isinstance(model, DknModel) else 96


def train(model, dataset, config, state=None, start_iteration=0, history=None,
          on_checkpoint=None):
    """Train ``model`` in place on a list of :class:`ScenePair`.

    Returns a :class:`TrainResult`. ``history`` holds the mean per-pixel L1
    error of each iteration. Resuming: pass the ``state`` and
    ``start_iteration`` (and optionally ``history``) of an earlier run.
    """
    if not dataset:
        raise ConfigurationError("training needs at least one scene")
    if model.config.scale != config.scale:
        raise ConfigurationError(
            f"model scale {model.config.scale} differs from training scale {config.scale}"
        )
    state = AdamState() if state is None else state
    history = [] if history is None else list(history)
    crop = config.crop or default_crop(model)
    samples = [_Sample(s, config.scale, model.config.guided) for s in dataset]
    step_loss = _dkn_loss if isinstance(model, DknModel) else _fdkn_loss
    params = model.parameters()
    model.train()
    last_finite = history[-1] if history else None

    with thread_limits():
        for it in range(start_iteration, config.iterations):
            rng = np.random.default_rng([config.seed, it])
            sample = samples[int(rng.integers(len(samples)))]
            loss, count = step_loss(model, sample, rng, crop)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(it, last_finite)
            grads = backward(loss, params)
            adam_step(params, grads, state, lr_at(it, config),
                      config.beta1, config.beta2, config.eps)
            last_finite = value / count
            history.append(last_finite)
            if it % 100 == 0:
                log.info("iter %d  l1/pixel %.5f  lr %.2e", it, last_finite, lr_at(it, config))
            done = it + 1
            if (config.checkpoint_every and on_checkpoint is not None
                    and done % config.checkpoint_every == 0):
                on_checkpoint(model, state, done, history)
    return TrainResult(model=model, history=history, state=state, iteration=config.iterations)
