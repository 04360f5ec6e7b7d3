"""Benchmark the compiled conv patch kernels against the numpy fallback.

Times im2col / col2im directly and a full conv2d forward+backward through
the tape, which routes through the active backend. Also verifies the two
backends produce bit-identical arrays on every timed shape.

Usage:
    python benchmarks/bench_kernels.py [--repeats N] [--batch N]
"""

import argparse
import statistics
import time

import numpy as np

from caproj import autodiff as ad
from caproj import kernels
from caproj.autodiff import Tensor
from caproj.kernels import available_backends, backend_name, set_backend


def _median_time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def _cases(batch):
    # (label, n, c, h, k, stride)
    return [
        ("3x3 s1 16ch 32px", batch, 16, 32, 3, 1),
        ("3x3 s2 32ch 32px", batch, 32, 32, 3, 2),
        ("1x1 s1 64ch 16px", batch, 64, 16, 1, 1),
    ]


def bench_patch_kernels(batch, repeats):
    rows = []
    rng = np.random.default_rng(0)
    for label, n, c, h, k, stride in _cases(batch):
        pad = k // 2
        hp = h + 2 * pad
        oh = (h + 2 * pad - k) // stride + 1
        x = rng.normal(size=(n, c, hp, hp))
        results = {}
        for name in available_backends():
            set_backend(name)
            cols = kernels.im2col(x, k, stride, oh, oh)
            back = kernels.col2im(cols, n, c, hp, hp, k, stride, oh, oh)
            results[name] = (cols, back)
            t_im = _median_time(lambda: kernels.im2col(x, k, stride, oh, oh), repeats)
            t_col = _median_time(
                lambda: kernels.col2im(cols, n, c, hp, hp, k, stride, oh, oh), repeats
            )
            rows.append((f"im2col {label}", name, t_im))
            rows.append((f"col2im {label}", name, t_col))
        names = available_backends()
        for other in names[1:]:
            for i in (0, 1):
                if not np.array_equal(results[names[0]][i], results[other][i]):
                    raise AssertionError(
                        f"backends disagree on {label} ({'im2col' if i == 0 else 'col2im'})"
                    )
    return rows


def bench_conv_train_step(batch, repeats):
    rows = []
    rng = np.random.default_rng(1)
    x = rng.normal(size=(batch, 16, 32, 32))
    w = rng.normal(size=(32, 16, 3, 3)) * 0.1
    b = np.zeros(32)

    def step():
        xt = Tensor(x, requires_grad=True)
        wt = Tensor(w, requires_grad=True)
        bt = Tensor(b, requires_grad=True)
        with ad.Tape() as tape:
            out = ad.conv2d(xt, wt, bt, stride=1, padding=1)
            loss = ad.frobenius_sq(out)
        tape.backward(loss)
        return wt.grad

    grads = {}
    for name in available_backends():
        set_backend(name)
        grads[name] = step()
        rows.append(("conv2d fwd+bwd 16->32ch 32px", name, _median_time(step, repeats)))
    names = available_backends()
    for other in names[1:]:
        if not np.array_equal(grads[names[0]], grads[other]):
            raise AssertionError("backends disagree on conv2d gradients")
    return rows


def render(rows):
    by_case = {}
    for case, backend, t in rows:
        by_case.setdefault(case, {})[backend] = t
    lines = [f"{'case':<34} {'python':>10} {'compiled':>10} {'speedup':>8}"]
    for case, times in by_case.items():
        py = times.get("python")
        comp = times.get("compiled")
        if comp is not None:
            lines.append(
                f"{case:<34} {py * 1e3:>8.2f}ms {comp * 1e3:>8.2f}ms "
                f"{py / comp:>7.2f}x"
            )
        else:
            lines.append(f"{case:<34} {py * 1e3:>8.2f}ms {'-':>10} {'-':>8}")
    return "\n".join(lines)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=7)
    parser.add_argument("--batch", type=int, default=32)
    args = parser.parse_args()

    initial = backend_name()
    print(f"backends available: {', '.join(available_backends())} "
          f"(default: {initial})")
    rows = bench_patch_kernels(args.batch, args.repeats)
    rows += bench_conv_train_step(args.batch, args.repeats)
    set_backend(initial)
    print(render(rows))
    print("bit-identical across backends: yes")


if __name__ == "__main__":
    main()
