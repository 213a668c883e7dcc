"""Benchmark the compiled kernels against the numpy fallback.

Times the two hot loops at the harness's production sizes: the
closed-loop pendulum episode (20 s at 500 Hz, four RK4 substeps per
sample) and the lifted linear rollout used for model scoring (57 states,
9489 steps, single and batched over ten episodes).

Run as ``python benchmarks/benchmark_kernels.py``. The compiled backend
is imported directly, so the script reports both even when
``CLKOOP_NO_EXTENSION`` is set for the package.
"""

import time

import numpy as np

from clkoop._accel import fallback
from clkoop.furuta_sim import DatasetConfig, FurutaParams, default_controller, \
    generate_signal

try:
    from clkoop._accel import _kernels as compiled
except ImportError:
    compiled = None


def timeit(fn, repeats=5):
    fn()  # warm up
    start = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - start) / repeats


def episode_case(impl):
    params = FurutaParams().as_vector()
    ctrl = default_controller()
    cfg = DatasetConfig()
    n = 10000
    dt = 1.0 / 500.0
    refs = np.column_stack([
        generate_signal(cfg.r1_spec, n, dt),
        generate_signal(cfg.r2_spec, n, dt),
    ])
    ffwd = generate_signal(cfg.f_spec, n, dt)
    noise = np.zeros((n, 2))

    def run():
        impl.furuta_episode_loop(params, ctrl.A_c, ctrl.B_c, ctrl.C_c,
                                 ctrl.D_c, refs, ffwd, noise, 0.0,
                                 np.zeros(4), np.zeros(2), dt, 4, 0.6)

    return run


def rollout_case(impl, batched):
    rng = np.random.default_rng(0)
    n, nu, steps, episodes = 57, 61, 9489, 10
    A = rng.standard_normal((n, n)) * 0.1
    B = rng.standard_normal((n, nu))
    if batched:
        x0 = rng.standard_normal((n, episodes))
        inputs = rng.standard_normal((steps, nu, episodes))

        def run():
            impl.linear_rollout_batch(A, B, x0, inputs)
    else:
        x0 = rng.standard_normal(n)
        inputs = rng.standard_normal((steps, nu))

        def run():
            impl.linear_rollout(A, B, x0, inputs)

    return run


def main():
    cases = [
        ("pendulum episode (10k samples, RK4x4)", episode_case),
        ("lifted rollout (57 states, 9489 steps)",
         lambda impl: rollout_case(impl, batched=False)),
        ("batched rollout (10 episodes)",
         lambda impl: rollout_case(impl, batched=True)),
    ]
    print(f"{'kernel':<42}{'fallback':>12}{'compiled':>12}{'speedup':>10}")
    for name, case in cases:
        slow = timeit(case(fallback))
        if compiled is None:
            print(f"{name:<42}{slow * 1e3:>10.1f}ms{'n/a':>12}{'':>10}")
            continue
        fast = timeit(case(compiled))
        print(f"{name:<42}{slow * 1e3:>10.1f}ms{fast * 1e3:>10.1f}ms"
              f"{slow / fast:>9.1f}x")
    if compiled is None:
        print("\ncompiled extension not available; build it with "
              "`pip install -e . --no-build-isolation`")


if __name__ == "__main__":
    main()
