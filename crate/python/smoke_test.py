"""Smoke test for the backstep extension module.

Build and install first:  pip install --no-build-isolation -e crates/py
"""
import json
import math
import tempfile
from pathlib import Path

import backstep


def main():
    p = backstep.CoefficientProfile.paper_example()
    case, margin = p.classify()
    assert case == 2, case
    tf = p.settling_time()
    assert abs(tf - 1.525388) < 1e-4, tf

    k = backstep.solve_kernels(p, nodes=65)
    assert k.case == 2 and k.iterations > 1
    passed, slack = k.bound_check()
    assert passed, slack
    assert math.isfinite(k.eval("L12", 0.0, 1.0))

    n = 201
    g = k.gains(n)
    w = g.z
    u0 = [x * x for x in w]
    v0 = [math.exp(x) for x in w]
    t, l2, _, _ = backstep.simulate_plant(p, u0, v0, 1.2 * tf, gains=g)
    assert l2[-1] / l2[0] < 1e-2, l2[-1] / l2[0]
    t, l2_open, _, _ = backstep.simulate_plant(p, u0, v0, 3.0)
    assert l2_open[-1] > l2_open[0]

    zero = backstep.solve_kernels(backstep.CoefficientProfile.constant(1.0, 1.0), nodes=33)
    assert zero.iterations == 1
    assert zero.gains(41).controls([1.0] * 41, [1.0] * 41) == (0.0, 0.0)

    try:
        backstep.validate_config("")
    except ValueError as e:
        assert "mode" in str(e) and "coefficients" in str(e)
    else:
        raise AssertionError("empty config accepted")

    with tempfile.TemporaryDirectory() as d:
        cfg = Path(d) / "exp.toml"
        cfg.write_text(
            'mode = "kernels-only"\n[coefficients]\nkind = "constant"\nlambda = 2.0\nmu = 1.0\nb = 0.5\n'
            "[grid]\nn_w = 33\nn_s = 33\n"
        )
        summary = json.loads(backstep.run_experiment(str(cfg), out=str(Path(d) / "out")))
        assert summary["case"] == 2
        assert (Path(d) / "out" / "kernels.csv").exists()

    print(f"ok: case {case}, Tf = {tf:.6f}, closed-loop ratio {l2[-1] / l2[0]:.2e}")


if __name__ == "__main__":
    main()
