import runpy
from pathlib import Path

import pytest

NOTEBOOKS = Path(__file__).resolve().parent.parent / "notebooks"


@pytest.mark.parametrize("name", ["01_poses_and_alignment.py", "03_report_tables.py"])
def test_notebook_runs(name, capsys):
    runpy.run_path(str(NOTEBOOKS / name), run_name="__main__")
    assert capsys.readouterr().out
