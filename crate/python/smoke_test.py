"""Smoke test for the pysnailopt extension.

Build and install first:

    pip install --no-build-isolation -e crates/py
    python python/smoke_test.py
"""

import json
import math
import tempfile
from pathlib import Path

import pysnailopt as so


def main():
    flux = so.kerr_free_flux(0.23)
    assert abs(flux - 0.38444) < 5e-4, flux

    e = so.potential_expansion(0.49, 0.9, 0.23, flux)
    assert abs(e["c4"]) < 1e-9 * abs(e["c2"]), e

    p = so.DeviceParams(0.49, 0.9, 0.23, 9.0, 1.5, 1.0, 3, cell_count=120)
    s = so.simulate(p, step_mhz=100.0)
    worst = max(abs(abs(a) ** 2 + abs(b) ** 2 - 1.0) for a, b in zip(s["s11"], s["s21"]))
    assert worst < 1e-9, worst

    d = so.dispersion_curve(p, step_mhz=100.0)
    assert d["k"][0] == 0.0 and d["k"][10] > 0.0

    m = so.evaluate(p, step_mhz=50.0)
    assert math.isclose(m["total"], m["matching_term"] + m["phase_term"] + m["harmonic_term"])

    xs = [[i / 9.0] for i in range(10)]
    gp = so.GaussianProcess(xs, [math.sin(6 * x[0]) for x in xs], seed=1)
    mean, var = gp.predict([[0.5]])
    assert abs(mean[0] - math.sin(3.0)) < 0.05 and var[0] >= 0.0
    assert gp.expected_improvement([0.5], -1.0) >= 0.0

    try:
        so.DeviceParams(-1.0, 0.9, 0.23, 9.0, 1.5, 1.0, 3)
    except so.SnailoptError:
        pass
    else:
        raise AssertionError("negative junction area accepted")

    cfg = json.loads(so.desk_config("unused"))
    assert cfg["metric"]["matching_mode"] == "direct"

    # a tiny end-to-end run
    cfg["grid"]["A_J_um2"] = {"min": 0.4, "max": 0.55, "step": 0.15}
    cfg["grid"]["rho_Ic_uA_um2"] = {"min": 0.8, "max": 1.1, "step": 0.3}
    cfg["grid"]["t_nm"] = {"min": 8.0, "max": 10.0, "step": 2.0}
    cfg["grid"]["alpha"] = {"min": 0.23, "max": 0.23, "step": 0.02}
    cfg["grid"]["pitch"] = {"min": 3.0, "max": 3.0, "step": 1.0}
    cfg["grid"]["L_load"] = {"min": 1.5, "max": 1.5, "step": 0.5}
    cfg["grid"]["C_load"] = {"min": 1.0, "max": 1.0, "step": 0.5}
    cfg["optimizer"]["budget"] = 12
    cfg["optimizer"]["max_warm_start"] = 8
    cfg["drive"]["pump_amplitudes_ua"] = {"min": 0.2, "max": 0.4, "step": 0.1}
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "config.json"
        path.write_text(json.dumps(cfg))
        out = so.run_pipeline(str(path), out=str(Path(tmp) / "run"))
        assert out["ran"] == ["stage1", "optimize", "stage3", "report"], out["ran"]
        assert out["qstar"]["performance_db"] > 0.0
        again = so.run_pipeline(str(path), out=str(Path(tmp) / "run"))
        assert again["ran"] == []
        files = so.report(str(Path(tmp) / "run"))
        assert "report/pstar.s2p" in files, files

    print("pysnailopt smoke test passed")


if __name__ == "__main__":
    main()
