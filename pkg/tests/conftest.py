import json
import os
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
TOY_CONFIG = ROOT / "configs" / "toy.yaml"
RESULTS = pytest.StashKey[dict]()
PIPELINE = ["prepare-data", "train-detector", "gen-patch", "train-defense", "train-mask-baseline",
            "evaluate", "report"]


def run_pipeline(config: Path, out: Path, commands=PIPELINE):
    from uavpatch.cli import EXIT_OK, run
    for cmd in commands:
        code = run([cmd, "--config", str(config), "--out", str(out)])
        assert code == EXIT_OK, f"{cmd} exited with {code}"


@pytest.fixture(scope="session")
def toy_config():
    from uavpatch.config import load_config
    return load_config(TOY_CONFIG, environ={})


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory, toy_config):
    """The full toy pipeline run once per session.

    Set ACCEPTANCE_TOY_RUN to a directory to keep the run between sessions;
    stages already present there are not rerun.
    """
    keep = os.environ.get("ACCEPTANCE_TOY_RUN")
    out = Path(keep) if keep else tmp_path_factory.mktemp("toy") / "run"
    from uavpatch.cli import STAGE_DIRS, eval_tag
    tag = eval_tag(toy_config)
    done = {c: (out / STAGE_DIRS[c]).exists() for c in PIPELINE}
    done["evaluate"] = (out / "evaluate" / tag).exists()
    done["report"] = (out / "report" / tag).exists()
    run_pipeline(TOY_CONFIG, out, [c for c in PIPELINE if not done[c]])
    return out


@pytest.fixture(scope="session")
def toy_record(toy_run, toy_config):
    from uavpatch.cli import eval_tag
    return json.loads((toy_run / "evaluate" / eval_tag(toy_config) / "record.json").read_text())


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(RESULTS, None)
    if results is None:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        ok, detail = results.get(n, (False, "not run or errored before a verdict"))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} - {detail}")
