"""Central finite-difference verification of analytic gradients."""

import time
from dataclasses import dataclass, field

import numpy as np

from dkn import autograd as ag
from dkn.autograd import Tensor, backward, branch_trace, no_grad


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tolerance: float
    checked: int
    skipped: int = 0
    worst: tuple = ()
    details: dict = field(default_factory=dict)

    @property
    def passed(self):
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: max rel err {self.max_rel_error:.3e} "
                f"(tol {self.tolerance:.0e}, {self.checked} coords"
                + (f", {self.skipped} on kinks skipped)" if self.skipped else ")"))


def relative_errors(analytic, numeric, scale):
    """|a - n| / max(|a|, |n|, 1e-6 * scale).

    ``scale`` is the largest analytic magnitude of the tensor being checked;
    components far below it are compared on that scale instead of their own.
    """
    floor = max(1e-6 * scale, 1e-12)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _sample(size, n_samples, rng):
    if n_samples is None or n_samples >= size:
        return np.arange(size)
    return np.sort(rng.choice(size, size=n_samples, replace=False))


def _traced(fn):
    with branch_trace() as trace:
        value = fn().item()
    return value, trace


def _central_difference(evaluate, flat, i, step, reference):
    """Central difference at ``flat[i]``, or None if either side crosses a kink."""
    old = flat[i]
    flat[i] = old + step
    fp, tp = _traced(evaluate)
    flat[i] = old - step
    fm, tm = _traced(evaluate)
    flat[i] = old
    if tp != reference or tm != reference:
        return None
    return (fp - fm) / (2 * step)


def finite_difference_check(fn, x, step=1e-5, tolerance=1e-4, n_samples=None, seed=0,
                            name="fn"):
    """Compare the tape gradient of scalar ``fn`` at ``x`` with central differences.

    ``fn`` maps a Tensor to a scalar Tensor. Coordinates whose +-step
    evaluations take a different branch at a non-smooth op (relu, clamp,
    sampler cell) are skipped and counted. Failures are reported, not raised.
    """
    x = np.array(x, dtype=np.float64)
    t = Tensor(x.copy(), requires_grad=True)
    with branch_trace() as reference:
        loss = fn(t)
    backward(loss)
    analytic = t.grad
    rng = np.random.default_rng(seed)
    idx = _sample(x.size, n_samples, rng)
    flat = x.reshape(-1)
    kept, numeric = [], []
    with no_grad():
        for i in idx:
            d = _central_difference(lambda: fn(Tensor(x.copy())), flat, i, step, reference)
            if d is not None:
                kept.append(i)
                numeric.append(d)
    skipped = len(idx) - len(kept)
    idx = np.asarray(kept, dtype=np.intp)
    numeric = np.asarray(numeric)
    a = analytic.reshape(-1)[idx]
    err = relative_errors(a, numeric, np.abs(analytic).max())
    worst = int(np.argmax(err)) if len(err) else 0
    return GradCheckReport(
        name=name,
        max_rel_error=float(err.max()) if len(err) else 0.0,
        tolerance=tolerance,
        checked=len(idx),
        skipped=skipped,
        worst=(int(idx[worst]), float(a[worst]), float(numeric[worst])) if len(err) else (),
    )


def check_parameters(loss_fn, params, step=1e-5, tolerance=1e-3, n_per_param=20, seed=0,
                     name="model"):
    """Finite-difference check over sampled coordinates of every parameter.

    ``loss_fn()`` recomputes the scalar loss from the current parameter values
    in ``params`` (name -> Parameter, float64).
    """
    rng = np.random.default_rng(seed)
    with branch_trace() as reference:
        loss = loss_fn()
    grads = backward(loss, params)
    per_param = {}
    worst_overall = 0.0
    checked = skipped = 0
    with no_grad():
        for pname, p in params.items():
            g = grads[pname].reshape(-1)
            flat = p.data.reshape(-1)
            kept, numeric = [], []
            for i in _sample(flat.size, n_per_param, rng):
                d = _central_difference(loss_fn, flat, i, step, reference)
                if d is None:
                    skipped += 1
                else:
                    kept.append(i)
                    numeric.append(d)
            if not kept:
                continue
            err = relative_errors(g[kept], np.asarray(numeric), np.abs(g).max())
            per_param[pname] = float(err.max())
            worst_overall = max(worst_overall, per_param[pname])
            checked += len(kept)
    return GradCheckReport(name=name, max_rel_error=worst_overall, tolerance=tolerance,
                           checked=checked, skipped=skipped, details=per_param)


# ----------------------------------------------------------------------
# the suite behind ``dkn gradcheck``


def _probe(rng, shape):
    """Random linear functional so that sums do not hide gradient errors."""
    weights = rng.standard_normal(shape)
    return lambda out: ag.total(ag.mul(out, Tensor(weights)))


def _away_from_zero(rng, shape, margin):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _fractional(rng, shape, lo, hi, margin=0.05):
    x = rng.uniform(lo, hi, size=shape)
    frac = x - np.floor(x)
    x = np.where(frac < margin, x + margin, x)
    return np.where(frac > 1 - margin, x - margin, x)


def run_suite(seed=0, tolerance=1e-3, step=1e-5, include_model=True):
    """Run every gradient check and return the list of reports."""
    from dkn.filtering import GridSpec, bilinear_sample, deformable_weighted_average, restrict_offsets
    from dkn.training import l1_loss

    rng = np.random.default_rng(seed)
    reports = []

    def check(name, fn, x, **kw):
        reports.append(finite_difference_check(fn, x, step=step, tolerance=tolerance,
                                               seed=seed, name=name, **kw))

    # conv2d: input, weight, bias with stride and padding
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    probe = _probe(rng, (2, 4, 4, 3))
    check("conv2d/input", lambda t: probe(ag.conv2d(t, Tensor(w), Tensor(b), 2, 1)), x)
    check("conv2d/weight", lambda t: probe(ag.conv2d(Tensor(x), t, Tensor(b), 2, 1)), w)
    check("conv2d/bias", lambda t: probe(ag.conv2d(Tensor(x), Tensor(w), t, 2, 1)), b)

    # batch norm, both modes
    x = rng.standard_normal((1, 2, 4, 4))
    gamma = rng.uniform(0.5, 1.5, 2)
    beta = rng.standard_normal(2)
    probe = _probe(rng, x.shape)
    rm, rv = np.zeros(2), np.ones(2)

    def bn(t, s=None, h=None, training=True):
        return probe(ag.batch_norm(t, Tensor(gamma) if s is None else s,
                                   Tensor(beta) if h is None else h,
                                   rm.copy(), rv.copy(), training))

    check("batch_norm/input", bn, x)
    check("batch_norm/scale", lambda t: bn(Tensor(x), s=t), gamma)
    check("batch_norm/shift", lambda t: bn(Tensor(x), h=t), beta)
    check("batch_norm/eval", lambda t: bn(t, training=False), x)

    # pointwise ops
    x = _away_from_zero(rng, (1, 2, 3, 3), 0.1)
    probe = _probe(rng, x.shape)
    check("sigmoid", lambda t: probe(ag.sigmoid(t)), x)
    check("relu", lambda t: probe(ag.relu(t)), x)
    other = rng.standard_normal(x.shape)
    check("elementwise_mul", lambda t: probe(ag.mul(t, Tensor(other))), x)
    check("channel_center", lambda t: probe(ag.channel_center(t)), x)
    pos = rng.uniform(0.5, 2.0, x.shape)
    check("channel_normalize", lambda t: probe(ag.channel_normalize(t)), pos)

    # bilinear sampler w.r.t. image and positions
    img = rng.standard_normal((1, 2, 6, 7))
    where = np.empty((1, 6, 3, 4))
    where[:, 0::2] = _fractional(rng, (1, 3, 3, 4), 0.2, 5.8)
    where[:, 1::2] = _fractional(rng, (1, 3, 3, 4), 0.2, 4.8)
    probe = _probe(rng, (1, 6, 3, 4))
    check("bilinear/image", lambda t: probe(bilinear_sample(t, Tensor(where))), img)
    check("bilinear/positions", lambda t: probe(bilinear_sample(Tensor(img), t)), where)

    # weighted average w.r.t. offsets, kernels and target
    grid = GridSpec(3)
    target = rng.standard_normal((1, 1, 8, 8))
    base = grid.base(np.float64)[None, :, None, None]
    rows = np.arange(8)[None, None, :, None]
    cols = np.arange(8)[None, None, None, :]
    absolute = np.empty((1, 18, 8, 8))
    absolute[:, 0::2] = _fractional(rng, (1, 9, 8, 8), 0.2, 6.8)
    absolute[:, 1::2] = _fractional(rng, (1, 9, 8, 8), 0.2, 6.8)
    offsets = absolute - base - np.where(np.arange(18)[None, :, None, None] % 2 == 0, cols, rows)
    kern = ag.channel_center(Tensor(rng.uniform(0, 1, (1, 9, 8, 8)))).data
    probe = _probe(rng, (1, 1, 8, 8))

    def wavg(tg=None, k=None, o=None):
        return probe(deformable_weighted_average(
            Tensor(target) if tg is None else tg, Tensor(kern) if k is None else k,
            Tensor(offsets) if o is None else o, grid, residual=True))

    check("weighted_average/offsets", lambda t: wavg(o=t), offsets)
    check("weighted_average/kernels", lambda t: wavg(k=t), kern)
    check("weighted_average/target", lambda t: wavg(tg=t), target)
    check("restrict_offsets",
          lambda t: probe(deformable_weighted_average(
              Tensor(target), Tensor(kern), restrict_offsets(t, grid), grid, True)),
          offsets)

    # L1 loss off ties
    pred = rng.standard_normal((1, 1, 4, 4))
    gt = pred + _away_from_zero(rng, pred.shape, 0.1)
    check("l1_loss", lambda t: l1_loss(t, Tensor(gt)), pred)

    # pixel shuffle pair
    x = rng.standard_normal((1, 2, 8, 8))
    probe = _probe(rng, (1, 32, 2, 2))
    check("pixel_unshuffle", lambda t: probe(ag.pixel_unshuffle(t, 4)), x)

    if include_model:
        reports.append(check_model(seed=seed, step=step, tolerance=tolerance))
    return reports


def check_model(seed=0, step=1e-5, tolerance=1e-3, n_per_param=20):
    """End-to-end DKN patch: L1 loss of the center prediction vs. every parameter."""
    from dkn.model import ModelConfig, build_model, forward_patch
    from dkn.training import l1_loss

    rng = np.random.default_rng(seed + 1)
    model = build_model(ModelConfig(), seed=seed, dtype=np.float64)
    # move the sampling positions off the integer lattice
    for head in model.offset_heads.values():
        head.weight.data[...] = rng.uniform(-0.3, 0.3, head.weight.shape)
        head.bias.data[...] = rng.uniform(0.5, 1.5, head.bias.shape)
    guide = rng.uniform(0, 1, (1, 3, 51, 51))
    target = rng.uniform(0, 1, (1, 1, 51, 51))
    gt = Tensor(np.full((1, 1, 1, 1), 2.0))
    params = model.parameters()

    def loss_fn():
        return l1_loss(forward_patch(model, guide, target), gt)

    return check_parameters(loss_fn, params, step=step, tolerance=tolerance,
                            n_per_param=n_per_param, seed=seed, name="dkn_patch/parameters")


def main_suite(seed=0, out=print):
    start = time.perf_counter()
    reports = run_suite(seed=seed)
    for r in reports:
        out(r.line())
    elapsed = time.perf_counter() - start
    ok = all(r.passed for r in reports)
    out(f"{'all checks passed' if ok else 'gradient check FAILED'} in {elapsed:.1f}s")
    return ok
