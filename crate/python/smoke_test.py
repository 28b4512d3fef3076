"""Smoke test for the es_adapt_py extension.

Build and install first:

    cd crates/python && maturin build --release -o dist && pip install dist/*.whl
"""

import math

import es_adapt_py as es


def main():
    names = [name for name, _ in es.presets()]
    assert "state_dep_case2" in names and "timevar_case1" in names

    arm = es.ManipulatorParams()
    h = arm.inertia_matrix([0.3, -0.7])
    assert h[0][1] == h[1][0]
    assert h[0][0] > 0 and h[0][0] * h[1][1] - h[0][1] ** 2 > 0

    cert = es.lyapunov_certificate([[1.0, 1.0], [1.0, 1.0]])
    assert abs(cert["p"][0][0] - 1.5) < 1e-12 and abs(cert["p"][0][1] - 0.5) < 1e-12
    assert cert["residual"] < 1e-10

    cfg = es.SimConfig.preset("nominal", ["sim.iterations=2", "sim.dt=0.004"])
    assert cfg.iterations == 2 and cfg.dt == 0.004
    trace = es.run_episode(cfg, [0.0, 0.0])
    assert len(trace["t"]) == 1001
    assert max(trace["z_norm"]) < 1e-6

    run = es.run_mes_loop(cfg)
    assert len(run) == 2 and all(math.isfinite(j) for j in run.costs)

    est = es.MesEstimator([0.05, 0.04], [7.4, 7.5], [1.0, 1.0], 4.0)
    state = est.initial_state()
    for _ in range(500):
        x = state.delta_hat
        state = est.step(state, (x[0] + 1.0) ** 2 + (x[1] + 3.0) ** 2)
    assert state.k == 500

    try:
        es.SimConfig.preset("state_dep_case2", ["mes.frequencies=[7.4, 7.4]"])
    except ValueError as e:
        assert "mes.frequencies" in str(e)
    else:
        raise AssertionError("duplicate frequencies accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
