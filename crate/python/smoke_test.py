"""Smoke test for the vmbpo_py extension.

Looks for the module on sys.path first, then for a cargo-built library in
target/release (build with
`cargo build --release -p vmbpo-py --features extension-module`).
"""

import importlib.machinery
import importlib.util
import json
import math
import pathlib
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load():
    try:
        import vmbpo_py

        return vmbpo_py
    except ImportError:
        pass
    for name in ("libvmbpo_py.so", "libvmbpo_py.dylib", "vmbpo_py.dll"):
        path = ROOT / "target" / "release" / name
        if path.exists():
            loader = importlib.machinery.ExtensionFileLoader("vmbpo_py", str(path))
            spec = importlib.util.spec_from_loader("vmbpo_py", loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit("vmbpo_py not found; build it first")


def main():
    v = load()
    chain = v.fixture("chain")
    assert json.loads(chain)["states"] == ["s0", "term"]

    values = v.soft_values(chain, [[0.5, 0.5], [0.5, 0.5]])
    assert abs(values[0] - 0.620115) < 1e-6, values
    assert abs(values[0] - math.log(0.5 * math.e + 0.5)) < 1e-12

    with tempfile.TemporaryDirectory() as tmp:
        cfg = pathlib.Path(tmp) / "chain.toml"
        cfg.write_text('[mdp]\nkind = "chain"\n[solver]\nem_iterations = 1\n')
        v.solve(str(cfg), pathlib.Path(tmp) / "solve")
        row = (pathlib.Path(tmp) / "solve" / "value.csv").read_text().splitlines()[1]
        assert abs(float(row.split(",")[1]) - 0.620115) < 1e-6, row

        bad = pathlib.Path(tmp) / "bad.toml"
        bad.write_text('[mdp]\nkind = "chain"\nbogus = 1\n')
        try:
            v.solve(str(bad), pathlib.Path(tmp) / "bad")
        except ValueError as e:
            assert "bogus" in str(e)
        else:
            raise AssertionError("unknown key accepted")

        report, ok = v.check(str(cfg), pathlib.Path(tmp) / "check", [1])
        assert ok, report

    print("smoke test passed: V(s0) = %.6f" % values[0])


if __name__ == "__main__":
    main()
