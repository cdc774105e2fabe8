"""Compare the compiled and numpy kernel backends.

Times each hot kernel on both backends, then one DKN training step and one
DKN shift-and-stitch inference with each backend swapped in.

    python3 benchmarks/bench_backends.py [--repeat N]
"""

import argparse
import time

import numpy as np

from dkn import kernels


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def kernel_cases(rng):
    x = rng.standard_normal((1, 32, 45, 45)).astype(np.float32)
    cols_shape = (1, 32, 49, 49)
    cols = rng.standard_normal((32 * 25, 45 * 45)).astype(np.float32)
    img = rng.standard_normal((1, 1, 128, 128)).astype(np.float32)
    pos = rng.uniform(0, 127, (1, 18, 128, 128)).astype(np.float32)
    grad = rng.standard_normal((1, 9, 128, 128)).astype(np.float32)
    return {
        "im2col 32x49x49 k5": lambda b: b.im2col(np.ascontiguousarray(
            np.pad(x, ((0, 0), (0, 0), (2, 2), (2, 2)))), 5, 5, 1),
        "col2im 32x49x49 k5": lambda b: b.col2im(cols, cols_shape, 5, 5, 1),
        "bilinear fwd 128^2 x9": lambda b: b.bilinear_forward(img, pos),
        "bilinear bwd 128^2 x9": lambda b: b.bilinear_backward(img, pos, grad, True, True),
    }


def end_to_end(backend, repeat):
    from dkn import autograd, filtering
    from dkn.inference import shift_and_stitch
    from dkn.model import ModelConfig, build_model
    from dkn.synthetic import generate_scene
    from dkn.training import TrainConfig, train

    # both modules bound the kernels module at import; swap its functions
    saved = {n: getattr(kernels, n) for n in ("im2col", "col2im", "bilinear_forward",
                                                 "bilinear_backward")}
    for n in saved:
        setattr(kernels, n, getattr(backend, n))
    assert autograd.kernels is kernels and filtering.kernels is kernels
    try:
        scenes = [generate_scene(0)]
        model = build_model(ModelConfig(), seed=0)
        step = best_of(lambda: train(model, scenes, TrainConfig(iterations=1)), repeat)
        rng = np.random.default_rng(0)
        g = rng.uniform(0, 1, (1, 3, 64, 64)).astype(np.float32)
        t = rng.uniform(0, 1, (1, 1, 64, 64)).astype(np.float32)
        model.eval()
        with autograd.no_grad():
            stitch = best_of(lambda: shift_and_stitch(model, g, t), repeat)
    finally:
        for n, fn in saved.items():
            setattr(kernels, n, fn)
    return {"train step (64px window)": step, "shift-and-stitch 64x64": stitch}


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    if kernels.compiled_backend is None:
        print("compiled backend not built; only numpy timings available")
    backends = {"numpy": kernels.numpy_backend}
    if kernels.compiled_backend is not None:
        backends["cython"] = kernels.compiled_backend

    rng = np.random.default_rng(0)
    rows = []
    for name, case in kernel_cases(rng).items():
        rows.append((name, {b: best_of(lambda: case(mod), args.repeat)
                            for b, mod in backends.items()}))
    e2e = {b: end_to_end(mod, max(1, args.repeat // 2)) for b, mod in backends.items()}
    for name in next(iter(e2e.values())):
        rows.append((name, {b: e2e[b][name] for b in backends}))

    header = f"{'case':28s}" + "".join(f"{b:>12s}" for b in backends)
    if "cython" in backends:
        header += f"{'speed-up':>10s}"
    print(header)
    for name, t in rows:
        line = f"{name:28s}" + "".join(f"{t[b] * 1000:10.2f}ms" for b in backends)
        if "cython" in backends:
            line += f"{t['numpy'] / t['cython']:9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
