"""Smoke test for the compiled extension.

Build and install it first, e.g. `maturin develop -m crates/py/Cargo.toml`,
then run `python python/smoke_test.py`.
"""

import math

import hedgefilter_py as hf


def main():
    f = hf.Family.bernoulli(3)
    theta = [0.0, math.log(9.0), -1.0]
    back = f.inverse_grad(f.grad_log_partition(theta))
    assert max(abs(a - b) for a, b in zip(back, theta)) < 1e-10
    assert f.kl_divergence(theta, theta) == 0.0

    flt = hf.Filter(f, -3.0, 3.0, hf.Channel.bsc(0.1))
    for z in ([1, 0, 1], [1, 1, 1], [0, 0, 1]):
        flt.observe([float(v) for v in z])
    assert flt.t == 4

    h = hf.Hedge(0.0, 1.0, horizon=100)
    h.step(0.5, 1)
    assert abs(h.tau - 0.1) < 1e-15

    sim = hf.simulate(preset="exp2a", seed=3)
    report = sim["report"]
    adaptive = report["total_errors"]
    _, fixed = report["static_threshold"]
    print(f"exp2a seed 3: {adaptive} errors vs {fixed} for the best fixed threshold")
    assert len(sim["records"]) == 1000

    for check_id, name, passed, detail in hf.run_checks([1, 2, 11]):
        print(f"{'PASS' if passed else 'FAIL'} {check_id} {name}: {detail}")
        assert passed
    print("ok")


if __name__ == "__main__":
    main()
