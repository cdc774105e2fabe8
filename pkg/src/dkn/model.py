"""DKN and FDKN networks.

Both models regress a per-pixel kernel field (k*k taps) and offset field
(2*k*k displacements) from a guidance image and a bicubic-upsampled target.
DKN runs two 7-layer feature stacks with a 51x51 receptive field and two
stride-2 layers, so one pass yields fields on a stride-4 lattice. FDKN
stacks the 16 stride-4 sub-images as channels, runs six 3x3 layers at
quarter resolution and pixel-shuffles its 16x wider heads back to full
resolution.
"""

from dataclasses import asdict, dataclass

import numpy as np

from dkn import autograd as ag
from dkn.autograd import Parameter, Tensor
from dkn.errors import ConfigurationError, DimensionError
from dkn.filtering import GridSpec, deformable_weighted_average, restrict_offsets

RECEPTIVE_FIELD = 51
RESAMPLE_STRIDE = 4
FDKN_WIDTHS = (64, 64, 64, 64, 64, 128)
FDKN_BN_LAYERS = 3
FEATURE_CHANNELS = 128


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "dkn"
    k: int = 3
    guided: bool = True
    residual: bool = True
    scale: int = 4
    guide_channels: int = 3
    learn_offsets: bool = True
    radius: int = 7
    resample_stride: int = RESAMPLE_STRIDE

    def __post_init__(self):
        if self.variant not in ("dkn", "fdkn"):
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if self.k % 2 == 0:
            raise ConfigurationError(f"kernel size must be odd, got {self.k}")
        if self.scale not in (4, 8, 16):
            raise ConfigurationError(f"scale must be 4, 8 or 16, got {self.scale}")
        if self.resample_stride ** 2 != 16:
            raise ConfigurationError("resample stride is fixed at 4 (16 sub-images)")
        if self.guide_channels < 1:
            raise ConfigurationError("guidance needs at least one channel")
        GridSpec(self.k, self.radius)

    @property
    def grid(self):
        return GridSpec(self.k, self.radius)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Conv:
    def __init__(self, name, cin, cout, size, rng, stride=1, padding=0, bias=True,
                 zero=False, dtype=np.float32):
        self.name = name
        self.stride = stride
        self.padding = padding
        shape = (cout, cin, size, size)
        if zero:
            w = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(cin * size * size)
            w = rng.uniform(-bound, bound, size=shape)
        self.weight = Parameter(w, f"{name}.weight", dtype=dtype)
        self.bias = Parameter(np.zeros(cout), f"{name}.bias", dtype=dtype) if bias else None

    def __call__(self, x):
        return ag.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self):
        out = {self.weight.name: self.weight}
        if self.bias is not None:
            out[self.bias.name] = self.bias
        return out


class BatchNorm:
    def __init__(self, name, channels, dtype=np.float32, momentum=0.1, eps=1e-5):
        self.name = name
        self.scale = Parameter(np.ones(channels), f"{name}.scale", dtype=dtype)
        self.shift = Parameter(np.zeros(channels), f"{name}.shift", dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.training = True

    def __call__(self, x):
        return ag.batch_norm(x, self.scale, self.shift, self.running_mean,
                             self.running_var, self.training, self.momentum, self.eps)

    def parameters(self):
        return {self.scale.name: self.scale, self.shift.name: self.shift}

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}


class Stream:
    """Feature extractor: a list of ``(conv, batch_norm or None)`` blocks, each followed by ReLU."""

    def __init__(self, name, blocks):
        self.name = name
        self.blocks = blocks

    def __call__(self, x):
        for conv, bn in self.blocks:
            try:
                x = conv(x)
            except (ConfigurationError, DimensionError) as exc:
                raise DimensionError(f"layer {conv.name}: {exc}") from exc
            if bn is not None:
                x = bn(x)
            x = ag.relu(x)
        return x

    def layers(self):
        for conv, bn in self.blocks:
            yield conv
            if bn is not None:
                yield bn


def _dkn_stream(name, cin, rng, dtype):
    layers = [
        # (cin, cout, size, stride, batch norm)
        (cin, 32, 7, 1, True),
        (32, 32, 2, 2, False),
        (32, 64, 5, 1, True),
        (64, 64, 2, 2, False),
        (64, 128, 5, 1, True),
        (128, 128, 3, 1, False),
        (128, 128, 3, 1, False),
    ]
    blocks = []
    for i, (ci, co, size, stride, bn) in enumerate(layers, start=1):
        conv = Conv(f"{name}.conv{i}", ci, co, size, rng, stride=stride, bias=not bn, dtype=dtype)
        blocks.append((conv, BatchNorm(f"{name}.bn{i}", co, dtype) if bn else None))
    return Stream(name, blocks)


def _fdkn_stream(name, cin, rng, dtype):
    blocks = []
    ci = cin
    for i, co in enumerate(FDKN_WIDTHS, start=1):
        bn = i <= FDKN_BN_LAYERS
        conv = Conv(f"{name}.conv{i}", ci, co, 3, rng, padding=1, bias=not bn, dtype=dtype)
        blocks.append((conv, BatchNorm(f"{name}.bn{i}", co, dtype) if bn else None))
        ci = co
    return Stream(name, blocks)


class DeformableKernelModel:
    """Shared machinery of DKN and FDKN; see :func:`build_model`."""

    # number of output pixels covered by one head position
    fanout = 1

    def __init__(self, config, seed=0, dtype=np.float32):
        self.config = config
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.forward_count = 0
        rng = np.random.default_rng(seed)
        taps = config.k * config.k
        names = ["guide", "depth"] if config.guided else ["depth"]
        self.streams = {}
        self.weight_heads = {}
        self.offset_heads = {}
        for s in names:
            cin = self._stream_inputs(s)
            self.streams[s] = self._make_stream(s, cin, rng, self.dtype)
            self.weight_heads[s] = Conv(f"{s}.weight_head", FEATURE_CHANNELS,
                                        taps * self.fanout, 1, rng, dtype=self.dtype)
            if config.learn_offsets:
                # product of two zero heads has zero gradient: only the depth head starts at zero
                self.offset_heads[s] = Conv(f"{s}.offset_head", FEATURE_CHANNELS,
                                            2 * taps * self.fanout, 1, rng,
                                            zero=(s == "depth"), dtype=self.dtype)

    # -- bookkeeping ---------------------------------------------------

    def _stream_inputs(self, stream):
        raise NotImplementedError

    def _make_stream(self, name, cin, rng, dtype):
        raise NotImplementedError

    def _modules(self):
        for s in self.streams:
            yield from self.streams[s].layers()
            yield self.weight_heads[s]
            if s in self.offset_heads:
                yield self.offset_heads[s]

    def parameters(self):
        out = {}
        for m in self._modules():
            out.update(m.parameters())
        return out

    def buffers(self):
        out = {}
        for m in self._modules():
            if isinstance(m, BatchNorm):
                out.update(m.buffers())
        return out

    def parameter_count(self):
        return int(sum(p.data.size for p in self.parameters().values()))

    def train(self, mode=True):
        for m in self._modules():
            if isinstance(m, BatchNorm):
                m.training = mode
        return self

    def eval(self):
        return self.train(False)

    @property
    def training(self):
        return any(m.training for m in self._modules() if isinstance(m, BatchNorm))

    def astype(self, dtype):
        """Copy of the model with parameters and buffers cast to ``dtype``."""
        clone = type(self)(self.config, self.seed, dtype)
        clone.load_state({k: v.data for k, v in self.parameters().items()},
                         self.buffers())
        clone.train(self.training)
        return clone

    def load_state(self, params, buffers=None):
        own = self.parameters()
        if set(own) != set(params):
            missing = sorted(set(own) - set(params))
            extra = sorted(set(params) - set(own))
            raise ConfigurationError(f"parameter mismatch: missing={missing} unexpected={extra}")
        for name, p in own.items():
            value = np.asarray(params[name])
            if value.shape != p.shape:
                raise DimensionError(f"{name}: shape {value.shape}, expected {p.shape}")
            p.data = value.astype(self.dtype, copy=True)
        for name, buf in self.buffers().items():
            if buffers is not None and name in buffers:
                buf[...] = buffers[name]

    # -- forward pieces ----------------------------------------------------

    def _input(self, x):
        if x is None:
            return None
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.dtype != self.dtype:
            x = Tensor(x.data, dtype=self.dtype)
        return x

    def _prepare(self, x):
        return x

    def _expand(self, x):
        return x

    def features(self, guidance, target):
        target = self._input(target)
        feat_f = self.streams["depth"](self._prepare(target))
        feat_g = None
        if self.config.guided:
            if guidance is None:
                raise DimensionError("guided model requires a guidance image")
            guidance = self._input(guidance)
            if guidance.shape[1] != self.config.guide_channels:
                raise DimensionError(
                    f"guidance has {guidance.shape[1]} channels, model expects "
                    f"{self.config.guide_channels}"
                )
            if guidance.shape[2:] != target.shape[2:]:
                raise DimensionError(
                    f"guidance {guidance.shape[2:]} and target {target.shape[2:]} sizes differ"
                )
            feat_g = self.streams["guide"](self._prepare(guidance))
        return feat_g, feat_f

    def regress_weights(self, feat_g, feat_f, residual=None):
        residual = self.config.residual if residual is None else residual
        w = ag.sigmoid(self.weight_heads["depth"](feat_f))
        if self.config.guided:
            w = ag.mul(ag.sigmoid(self.weight_heads["guide"](feat_g)), w)
        w = self._expand(w)
        return ag.channel_center(w) if residual else ag.channel_normalize(w)

    def regress_offsets(self, feat_g, feat_f, grid=None):
        grid = self.config.grid if grid is None else grid
        if not self.config.learn_offsets:
            n, _, h, w = feat_f.shape
            r = self._fanout_side()
            return Tensor(np.zeros((n, 2 * grid.taps, h * r, w * r), dtype=self.dtype))
        o = self.offset_heads["depth"](feat_f)
        if self.config.guided:
            o = ag.mul(self.offset_heads["guide"](feat_g), o)
        return restrict_offsets(self._expand(o), grid)

    def _fanout_side(self):
        return 1

    def fields(self, guidance, target):
        """One network forward pass: ``(kernel field, offset field)``."""
        self.forward_count += 1
        feat_g, feat_f = self.features(guidance, target)
        return self.regress_weights(feat_g, feat_f), self.regress_offsets(feat_g, feat_f)


class DknModel(DeformableKernelModel):
    receptive_field = RECEPTIVE_FIELD

    def _stream_inputs(self, stream):
        return self.config.guide_channels if stream == "guide" else 1

    def _make_stream(self, name, cin, rng, dtype):
        return _dkn_stream(name, cin, rng, dtype)


class FdknModel(DeformableKernelModel):
    fanout = RESAMPLE_STRIDE * RESAMPLE_STRIDE

    def _stream_inputs(self, stream):
        c = self.config.guide_channels if stream == "guide" else 1
        return c * self.fanout

    def _make_stream(self, name, cin, rng, dtype):
        return _fdkn_stream(name, cin, rng, dtype)

    def _prepare(self, x):
        return ag.pixel_unshuffle(x, RESAMPLE_STRIDE)

    def _expand(self, x):
        return ag.pixel_shuffle(x, RESAMPLE_STRIDE)

    def _fanout_side(self):
        return RESAMPLE_STRIDE


def build_model(config, seed=0, dtype=np.float32):
    """Freshly initialized DKN or FDKN; deterministic given ``seed``."""
    cls = DknModel if config.variant == "dkn" else FdknModel
    return cls(config, seed, dtype)


# ----------------------------------------------------------------------
# functional surface


def extract_features(model, guidance_patch, target_patch):
    return model.features(guidance_patch, target_patch)


def regress_weights(model, feat_g, feat_f, residual=None):
    return model.regress_weights(feat_g, feat_f, residual)


def regress_offsets(model, feat_g, feat_f, grid=None):
    return model.regress_offsets(feat_g, feat_f, grid)


def forward_patch(model, guidance_patch, target_patch):
    """DKN output at the center pixel of a 51x51 receptive-field patch.

    ``target_patch`` is the bicubic-upsampled depth around the pixel; the
    result is a (1, 1, 1, 1) tensor.
    """
    if not isinstance(model, DknModel):
        raise ConfigurationError("forward_patch needs a DKN model")
    target_patch = model._input(target_patch)
    size = target_patch.shape[2:]
    if size != (RECEPTIVE_FIELD, RECEPTIVE_FIELD):
        raise DimensionError(
            f"patch must be {RECEPTIVE_FIELD}x{RECEPTIVE_FIELD}, got {size[0]}x{size[1]}"
        )
    weights, offsets = model.fields(guidance_patch, target_patch)
    center = RECEPTIVE_FIELD // 2
    return deformable_weighted_average(
        target_patch, weights, offsets, model.config.grid, model.config.residual,
        centers=([center], [center]),
    )


def forward_full_fdkn(model, guidance, target):
    """Full-resolution kernel and offset fields from one FDKN pass."""
    if not isinstance(model, FdknModel):
        raise ConfigurationError("forward_full_fdkn needs an FDKN model")
    target = model._input(target)
    h, w = target.shape[2:]
    if h % RESAMPLE_STRIDE or w % RESAMPLE_STRIDE:
        raise DimensionError(
            f"image {h}x{w} must be padded to a multiple of {RESAMPLE_STRIDE}"
        )
    return model.fields(guidance, target)
