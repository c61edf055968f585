"""Checks the bindings against closed-form values."""

import math

import shapeflow_py as sf


def main():
    assert sf.chamfer([[0, 0, 0]], [[1, 0, 0]]) == 2.0
    assert sf.wasserstein1([2.5], [-1.25]) == 3.75
    assert sf.wasserstein1([0, 1, 2], [2, 1, 0]) == 0.0

    n, mean, std, se = sf.monte_carlo_estimate([1.0, 2.0, 3.0])
    assert (n, mean, std) == (3, 2.0, 1.0)
    assert math.isclose(se, 1 / math.sqrt(3))
    assert sf.monte_carlo_estimate([4.0])[2] is None

    r_p, r_d, c_d = 0.09, 1.3, 0.8
    tau = r_d * c_d
    times = [i * 30 * tau / 300 for i in range(301)]
    p = sf.windkessel(times, [2.5] * len(times), r_p, r_d, c_d)
    assert math.isclose(p[-1], (r_p + r_d) * 2.5, rel_tol=1e-9)

    t = [0.1 * i for i in range(9)]
    w = [0.3, -1.2, 0.5]
    assert sf.osi(t, [w] * 9) == 0.0
    alt = [w if (i // 2) % 2 == 0 else [-x for x in w] for i in range(8)]
    assert sf.osi(t[:8], alt) == 0.5

    try:
        sf.wasserstein1([], [1.0])
    except ValueError:
        pass
    else:
        raise AssertionError("empty sample accepted")
    print("smoke test passed")


if __name__ == "__main__":
    main()
