"""Smoke test for the native extension.

    cargo build --release -p quadkan-py --features extension-module
    cp target/release/libquadkan_native.so python/quadkan_native.so
    python3 python/smoke_test.py [RUN_DIR]

or `maturin develop -m crates/python/Cargo.toml` followed by the script.
With RUN_DIR (a `quadkan train` output directory) the checkpoint is loaded and its metrics CoV printed.
"""
import math
import sys

import quadkan_native as q


def main():
    rows = q.spline_basis(3, 8, -1.0, 1.0, [i / 50 - 1.0 for i in range(101)])
    assert all(abs(sum(r) - 1.0) < 1e-12 for r in rows)

    adv, ret = q.gae([1.0, 1.0], [0.0, 0.0], [False, True], 5.0)
    assert abs(adv[0] - 1.9405) < 1e-12, adv

    assert abs(q.cov([1.0, 2.0, 3.0]) - 0.5) < 1e-12

    pol = q.Policy.load(sys.argv[1]) if len(sys.argv) > 1 else q.Policy.init("quadkan", 0)
    env = q.Env("thin_obstacle", 0)
    obs = env.reset()
    done = False
    while not done:
        obs, r, done, info = env.step(pol.act(*obs))
        assert math.isfinite(r)
    ret, dist, coll, steps, fell = env.metrics()
    print(f"{pol.variant}: return {ret:.2f} distance {dist:.3f} m steps {steps} collisions {coll}")
    if len(sys.argv) > 1:
        print(f"CoV {q.metrics_cov(sys.argv[1] + '/metrics.csv'):.4f}")
    print("smoke test ok")


if __name__ == "__main__":
    main()
