"""Smoke test for the Python bindings.

Builds the extension with cargo, loads it from a temp dir and checks a few
results on the bundled fixtures.

    python3 python/smoke_test.py
"""

import importlib.util
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module():
    subprocess.run(
        ["cargo", "build", "--release", "-p", "mfhinf-py"], cwd=ROOT, check=True
    )
    lib = ROOT / "target" / "release" / "libmfhinf_py.so"
    tmp = Path(tempfile.mkdtemp())
    dst = tmp / "mfhinf_py.so"
    shutil.copy(lib, dst)
    spec = importlib.util.spec_from_file_location("mfhinf_py", dst)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def main():
    m = load_module()
    assert set(m.FIXTURES) == {"sysA", "sysB", "zero", "nomf"}

    g = m.gamma_star("sysA", 1e-4)
    assert 0.2 < g < 0.3, g
    print(f"gamma_star(sysA) = {g:.6f}")

    sol = m.brl("sysA", 0.5)
    assert len(sol["s"]) == len(sol["P"])
    assert sol["j1_star"] <= 0.0

    try:
        m.brl("sysA", 0.01)
    except m.Infeasible as e:
        print(f"brl(sysA, 0.01): {e}")
    else:
        raise AssertionError("expected Infeasible")

    try:
        m.gamma_star("{not json")
    except ValueError:
        pass
    else:
        raise AssertionError("expected ValueError")

    z = m.synth_closed("zero")
    assert all(x == 0.0 for node in z["U"] for row in node for x in row)

    c = m.synth_closed("sysA")
    assert c["gainbound_ok"]
    (j1, se1), (j2, se2) = m.simulate("sysA", "closed", 4000, 7)
    print(f"J1 = {j1:.6f} +- {se1:.1e} (Riccati {c['j1_star']:.6f})")
    print(f"J2 = {j2:.6f} +- {se2:.1e} (Riccati {c['j2_star']:.6f})")
    assert abs(j2 - c["j2_star"]) < 5 * se2 + 1e-3 * abs(c["j2_star"])

    o = m.synth_open("sysA")
    assert "sufficient conditions" in o["certificate"]
    print(f"open loop: {o['certificate']}")

    print("ok")


if __name__ == "__main__":
    sys.exit(main())
