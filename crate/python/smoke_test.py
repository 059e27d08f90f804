"""Smoke test for the pysnls extension.

    pip install --no-build-isolation -e crates/python
    python python/smoke_test.py
"""

import math
import tempfile

import pysnls


def main():
    small = ["grid.n=64", "solver.horizon=0.05", "solver.dt=0.005"]

    cfg = pysnls.Config(overrides=small + ["model.beta=0.0"])
    assert len(cfg.hash()) == 12
    assert cfg.to_dict()["grid"]["n"] == 64
    assert pysnls.Config(cfg.to_toml()).hash() == cfg.hash()

    try:
        pysnls.Config(overrides=["model.alpha=6"])
    except ValueError as e:
        assert "model.alpha" in str(e)
    else:
        raise AssertionError("alpha = 6 accepted")

    sk = pysnls.solve_skeleton(cfg)
    assert len(sk) == 11 and len(sk.times) == 11
    m0, m1 = sk.norm_h[0] ** 2, sk.norm_h[-1] ** 2
    assert abs(m1 - m0) <= 1e-10 * m0, (m0, m1)
    assert isinstance(sk.terminal[0], complex)

    a = pysnls.solve_sde(cfg, path=3)
    b = pysnls.solve_sde(cfg, path=3)
    assert a.terminal == b.terminal
    assert a.terminal != pysnls.solve_sde(cfg, path=4).terminal
    zero = pysnls.solve_sde(cfg.with_overrides(["model.epsilon=0.0"]), path=3)
    assert zero.terminal == sk.terminal

    rate = pysnls.calibration_rate(1.8, 1.0)
    assert math.isclose(rate, 1.0 / (2 * 1.8**2), rel_tol=1e-12)

    with open("configs/calibration.toml") as f:
        cal = pysnls.Config(f.read(), ["sweep.n_paths=2000", "sweep.epsilons=[0.1]"])
    res = pysnls.minimize_action(cal)
    assert res["feasible"] and abs(res["cost"] - rate) / rate < 0.05, res["cost"]
    rows, csv = pysnls.epsilon_sweep(cal)
    assert csv.splitlines()[0] == "epsilon,n_paths,hits,p_hat,ci_lo,ci_hi,eps_log_p,failed"
    assert rows[0]["ci_lo"] <= rows[0]["p_hat"] <= rows[0]["ci_hi"]

    p, lo, hi = pysnls.wilson(37, 250)
    z, n = 1.959963984540054, 250
    c = (p + z * z / (2 * n)) / (1 + z * z / n)
    h = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / (1 + z * z / n)
    assert math.isclose(lo, c - h, rel_tol=1e-12) and math.isclose(hi, c + h, rel_tol=1e-12)

    with tempfile.TemporaryDirectory() as out:
        code = pysnls.run_cli(["skeleton", "--out", out, "--threads", "1"] + [a for s in small for a in ("--set", s)])
        assert code == 0
        assert pysnls.run_cli(["skeleton", "--out", out, "--set", "model.alpha=6"]) == 2

    print(f"pysnls {pysnls.__version__}: ok (I* = {res['cost']:.5f}, closed form {rate:.5f})")


if __name__ == "__main__":
    main()
