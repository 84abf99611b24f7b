#!/usr/bin/env python3
"""Smoke test for the balsam_py extension module.

Build the extension first:

    cargo build -p balsam-py --release

then run:

    python3 python/smoke_test.py
"""

import json
import math
import os
import shutil
import sys
import tempfile


def locate_extension():
    here = os.path.dirname(os.path.abspath(__file__))
    root = os.path.dirname(here)
    candidates = [
        os.path.join(root, "target", profile, name)
        for profile in ("release", "debug")
        for name in ("libbalsam_py.so", "libbalsam_py.dylib", "balsam_py.dll")
    ]
    for path in candidates:
        if os.path.exists(path):
            return path
    sys.exit(
        "balsam_py cdylib not found; run `cargo build -p balsam-py` "
        "(or --release) first"
    )


def import_extension():
    src = locate_extension()
    tmp = tempfile.mkdtemp(prefix="balsam_py_")
    dst = os.path.join(tmp, "balsam_py.so")
    shutil.copyfile(src, dst)
    sys.path.insert(0, tmp)
    import balsam_py

    return balsam_py


def check(name, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    print(f"[{status}] {name}" + (f" ({detail})" if detail else ""))
    if not ok:
        sys.exit(1)


def main():
    m = import_extension()

    basis = m.bspline_basis(3, [0.5], (0.0, 1.0), 0.25)
    check(
        "bspline partition of unity",
        abs(sum(basis) - 1.0) < 1e-12 and len(basis) == 4,
        f"sum={sum(basis):.2e}",
    )

    deriv = m.bspline_basis_derivative(3, [0.5], (0.0, 1.0), 0.25)
    check("bspline derivative sums to zero", abs(sum(deriv)) < 1e-10)

    check(
        "linear arc length (3-4-5)",
        abs(m.arc_length_linear(0.75, 4.0) - 5.0) < 1e-12,
    )

    flat = m.arc_length_spline([2.0, 2.0, 2.0, 2.0], 3, [0.5], (0.0, 1.0), 0.8, 200)
    check("constant spline trajectory has unit speed", abs(flat - 0.8) < 1e-10)

    check(
        "polyline length",
        abs(m.polyline_length([(0.0, 0.0), (3.0, 4.0)]) - 5.0) < 1e-12,
    )

    t = m.invert_event_time(math.exp(-1.0), 0.02, 0.0, 0.25, 0.0)
    check(
        "event-time inversion",
        abs(t - 4.0 * math.log(13.5)) < 1e-9,
        f"t={t:.6f}",
    )

    design = {
        "design": {
            "n": 30,
            "model": {"kind": "model1", "covariates": 1},
            "truth": {
                "lambda": 0.02,
                "beta": [0.05],
                "alpha": 0.25,
                "mu": [1.2, 0.25],
                "sigma": [[2.0, 3.0], [3.0, 5.0]],
                "sigma2": 4.0,
            },
            "covariates": [{"type": "bernoulli", "p": 0.5}],
            "schedule": [0.0, 2.0, 6.0, 12.0, 18.0],
            "censoring": {"administrative_time": 20.0, "independent_rate": 0.02},
            "seed": 20240801,
        }
    }
    simulated = json.loads(m.simulate_dataset(json.dumps(design)))
    subjects = simulated["subjects"]
    check(
        "simulation",
        len(subjects) == 30 and simulated["inversion_failures"] == 0,
        f"{len(subjects)} subjects",
    )
    check(
        "measurements truncated at the observed time",
        all(all(s <= rec["t"] + 1e-9 for s in rec["times"]) for rec in subjects),
    )

    fit_config = {
        "model": {"kind": "model1", "covariates": 1},
        "sampler": {
            "algorithm": "mwg",
            "chains": 2,
            "iterations": 600,
            "burn_in": 200,
            "thin": 2,
            "seed": 7,
        },
    }
    fit = json.loads(m.fit_dataset(json.dumps(fit_config), json.dumps(subjects), 2))
    names = [row["name"] for row in fit["summary"]]
    check(
        "fit summary shape",
        names[0] == "lambda" and "alpha" in names and fit["retained_per_chain"] == 200,
        f"{len(names)} parameters",
    )
    lam = next(r for r in fit["summary"] if r["name"] == "lambda")
    check(
        "lambda posterior sane",
        0.0 < lam["q025"] <= lam["mean"] <= lam["q975"] if lam["q025"] > 0 else False,
        f"mean={lam['mean']:.4f}",
    )
    check("dic finite", math.isfinite(fit["dic"]) and fit["p_d"] >= 0.0)

    base = [1.0, 4.0, 2.0, 3.0]
    chain = base + base
    rhat = m.split_rhat([chain, chain])
    check(
        "split rhat on repeated halves",
        abs(rhat - math.sqrt(3.0 / 4.0)) < 1e-12,
        f"rhat={rhat:.6f}",
    )

    ess = m.effective_sample_size([[float(i % 17) for i in range(400)]])
    check("ess returns a value", ess is not None and ess[0] > 0.0)

    dic_val, p_d = m.dic([8.0, 10.0, 12.0])
    check("dic hand arithmetic", dic_val == 12.0 and p_d == 2.0)

    print("all smoke tests passed")


if __name__ == "__main__":
    main()
