"""Smoke test for the `meningrade` Python extension.

Builds the extension with cargo unless MENINGRADE_SO points at a built library,
then grades a synthetic case end to end.
"""

import json
import os
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module(workdir: Path):
    so = os.environ.get("MENINGRADE_SO")
    if so is None:
        subprocess.run(
            ["cargo", "build", "-p", "meningrade-py", "--features", "extension-module"],
            cwd=ROOT,
            check=True,
        )
        target = Path(os.environ.get("CARGO_TARGET_DIR", ROOT / "target"))
        so = target / "debug" / "libmeningrade.so"
    shutil.copy(so, workdir / "meningrade.so")
    sys.path.insert(0, str(workdir))
    import meningrade

    return meningrade


def main() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        mg = load_module(tmp)

        assert json.loads(mg.grade())["grade"] == "I"
        assert mg.ki67_index(1, 3) == 25.0
        assert mg.ki67_index(0, 0) is None

        sweep = json.loads(mg.pr_sweep([("a", 0.9), ("b", 0.2)], [("a", True), ("b", False)]))
        assert sweep["best_f1"] == {"f1": 1.0, "threshold": 0.2}

        params = json.dumps({"slide_px": 4096, "mitoses": 4})
        manifest = Path(mg.synth(str(tmp / "src"), params))
        grade = json.loads(mg.process(str(manifest), str(manifest.parent / "bindings.json"), str(tmp / "case"), 2))
        assert grade["grade"] == "II", grade
        assert grade["main_contributing"] == "MitoticCount"

        text = mg.report(str(tmp / "case"), str(tmp / "report"))
        assert "Suggested grade: WHO II" in text

        try:
            mg.pr_sweep([("a", 0.5)], [("b", True)])
        except ValueError:
            pass
        else:
            raise AssertionError("mismatched keys must raise ValueError")
    print("python smoke test passed")


if __name__ == "__main__":
    main()
