"""Smoke test for the levy_codebook extension module.

Uses an installed module if one is importable; otherwise builds the cdylib
with cargo and imports it from a scratch directory.

    python python/smoke_test.py [--release]
"""

import argparse
import cmath
import importlib
import json
import math
import os
import shutil
import subprocess
import sys
import sysconfig
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load(release):
    try:
        return importlib.import_module("levy_codebook")
    except ImportError:
        pass
    profile = "release" if release else "debug"
    cmd = ["cargo", "build", "-p", "levy-codebook-python"] + (["--release"] if release else [])
    subprocess.run(cmd, cwd=ROOT, check=True)
    ext = {"darwin": ".dylib", "win32": ".dll"}.get(sys.platform, ".so")
    built = os.path.join(ROOT, "target", profile, "liblevy_codebook_py" + ext)
    scratch = tempfile.mkdtemp(prefix="levy-codebook-smoke-")
    suffix = sysconfig.get_config_var("EXT_SUFFIX") or ".so"
    shutil.copy(built, os.path.join(scratch, "levy_codebook" + suffix))
    sys.path.insert(0, scratch)
    return importlib.import_module("levy_codebook")


def bs_call(s, k, t, sigma):
    d1 = (math.log(s / k) + 0.5 * sigma**2 * t) / (sigma * math.sqrt(t))
    n = lambda x: 0.5 * math.erfc(-x / math.sqrt(2))
    return s * n(d1) - k * n(d1 - sigma * math.sqrt(t))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--release", action="store_true")
    lc = load(ap.parse_args().release)
    print("levy_codebook", lc.__version__)

    grid = lc.Grid(0.25, 5, 0.05, 20.0)
    cb = lc.Codebook.black_scholes(0.2, grid)
    assert cb.grid.shape == (5, 801), cb.grid.shape
    u = grid.frequencies()[500]
    assert abs(cb.get(0, 500) - (-0.02 * (u * u + 1j * u))) < 1e-12

    strikes = [0.8, 0.9, 1.0, 1.1, 1.2]
    p = lc.price(cb, 1.0, [0.0, 0.5, 1.0], strikes)
    assert p.rows()[0] == [max(1.0 - k, 0.0) for k in strikes]
    for i, t in enumerate([0.5, 1.0]):
        for j, k in enumerate(strikes):
            assert abs(p.price(i + 1, j) - bs_call(1.0, k, t, 0.2)) < 1e-6
    audit = lc.static_arbitrage(p)
    assert audit["passed"] and not audit["violations"], audit
    print("BS prices match closed form; surface is arbitrage-free")

    prices, recovered, error = lc.round_trip(cb)
    assert error < 1e-3, error
    print(f"round trip max interior error {error:.3e}")

    m = lc.BnsModel.desk_preset()
    assert m.psi0(1.0, 0) == 0
    assert abs(m.psi0(0.5, -1j)) < 1e-12
    assert abs(cmath.exp(m.cumulant(0.0, 1.0, 0.0, -1j)) - 1.0) < 1e-12
    calls = m.calls(1.0, [0.9, 1.0, 1.1])
    assert calls[0] > calls[1] > calls[2] > 0

    config = {
        "model": "bns", "lambda": 1, "delta": -0.5,
        "eta": {"kind": "compound-poisson-exp", "rate": 2.5, "theta": 2},
        "psiL": {"diffusion": 0.01},
        "grid": {"maturity_step": 0.1, "maturity_count": 6, "frequency_step": 0.5, "frequency_max": 5},
        "evolve": {"horizon": 0.3},
    }
    a = lc.evolve(json.dumps(config), "picard", seed=3)
    b = lc.evolve(json.dumps(config), "event", seed=3)
    gap = max(x.max_abs_diff(y) for x, y in zip(a["codebooks"], b["codebooks"]))
    assert a["times"] == b["times"] and gap < 1e-6, gap
    assert a["tau"] is None
    print(f"evolved {len(a['times'])} checkpoints, {len(a['jumps'])} jumps, solver gap {gap:.2e}")

    try:
        lc.Grid(-1.0, 5, 0.05, 20.0)
    except ValueError:
        pass
    else:
        raise AssertionError("negative step accepted")
    print("ok")


if __name__ == "__main__":
    main()
