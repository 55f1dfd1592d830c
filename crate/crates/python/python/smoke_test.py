"""Smoke test for the pfp_engine extension module.

Build the module first:

    cargo build --release -p pfp-python --features extension-module

then run this script from anywhere. PFP_ENGINE_LIB may point at the built
shared library; by default target/release/libpfp_engine.so is used.
"""

import json
import math
import os
import shutil
import struct
import sys
import tempfile

ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "..", ".."))


def import_engine():
    lib = os.environ.get("PFP_ENGINE_LIB", os.path.join(ROOT, "target", "release", "libpfp_engine.so"))
    if not os.path.exists(lib):
        sys.exit(f"missing {lib}; build with `cargo build --release -p pfp-python --features extension-module`")
    tmp = tempfile.mkdtemp()
    shutil.copy(lib, os.path.join(tmp, "pfp_engine.so"))
    sys.path.insert(0, tmp)
    import pfp_engine

    return pfp_engine


def model_bytes(mean, var, in_features=1, out_features=1):
    """A single dense layer without bias."""
    n = len(mean)
    ref = lambda offset: {"shape": [out_features, in_features], "offset": offset, "count": n}
    manifest = {
        "name": "single",
        "format_version": 1,
        "input_shape": [in_features],
        "calibration_factor": 1.0,
        "layers": [
            {
                "type": "dense",
                "out_features": out_features,
                "in_features": in_features,
                "spread_kind": "variance",
                "weight_mean": ref(0),
                "weight_spread": ref(4 * n),
                "bias": {"kind": "none"},
            }
        ],
        "payload_bytes": 8 * n,
    }
    text = json.dumps(manifest, separators=(",", ":")).encode()
    payload = struct.pack(f"<{n}f", *mean) + struct.pack(f"<{n}f", *var)
    return b"PFPM" + struct.pack("<IQ", 1, len(text)) + text + payload


def main():
    pe = import_engine()

    raw = model_bytes([2.0], [1.0])
    model = pe.Model.from_bytes(raw)
    assert model.to_bytes() == raw, "re-encoding changed the bytes"
    assert model.layers == ["dense"] and model.input_shape == [1]
    assert model.moments_exact()

    x = pe.Tensor([1, 1], [3.0])
    out = model.forward(x)
    assert (out.mean, out.var) == ([6.0], [9.0]), (out.mean, out.var)

    cal = model.apply_calibration(0.5)
    assert cal.forward(x).var == [4.5] and cal.calibration_factor == 0.5

    s = model.mc_predict(x, 20000, seed=7)
    mc_mean = sum(s.logits) / s.n_samples
    assert abs(mc_mean - 6.0) < 4 * 3.0 / math.sqrt(s.n_samples), mc_mean

    passed, report = model.validate(x, 5000)
    assert passed and report.endswith("status=pass\n"), report

    m, e = pe.relu_moments(0.0, 1.0)
    assert abs(m - 1 / math.sqrt(2 * math.pi)) < 1e-12 and abs(e - 0.5) < 1e-12

    probs = pe.Logits(1, 3, [0.0, 1.0, -1.0], [2.0, 2.0, 2.0]).sample(500, seed=3)
    d = probs.decompose()
    h = pe.shannon_entropy(probs.mean_probs())
    assert abs(d["mi"][0] + d["sme"][0] - h) < 1e-12
    assert pe.auroc([0.1, 0.2], [0.3, 0.4]) == 1.0

    two = pe.Model.from_bytes(model_bytes([4.0, 0.0], [1e-4, 4.0], in_features=2))
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.pfpm")
        two.save(path)
        assert pe.Model.load(path).to_bytes() == two.to_bytes()

    # Class c follows feature c; features 2 and 3 only carry noise.
    task = pe.Model.from_bytes(
        model_bytes([4, 0, 0, 0, 0, 4, 0, 0], [1e-4, 1e-4, 4, 4, 1e-4, 1e-4, 4, 4], in_features=4, out_features=2)
    )
    ident = pe.Tensor([2, 4], [1, 0, 0, 0, 0, 1, 0, 0])
    ood = pe.Tensor([2, 4], [0, 0, 1, 1, 0, 0, 1, 1])
    r = task.evaluate(ident, [0, 1], ood=ood, samples=200)
    assert r["accuracy"] == 1.0 and r["auroc"] == 1.0, r
    assert task.predict(ident, mode="mc", samples=10).n_samples == 10

    try:
        pe.Model.from_bytes(b"XXXXjunk")
    except pe.PfpError as exc:
        assert str(exc).startswith("BadMagic"), exc
    else:
        raise AssertionError("corrupt bytes were accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
