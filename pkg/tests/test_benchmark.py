import importlib.util
import json
from pathlib import Path

from conftest import needs_numba

BENCH = Path(__file__).resolve().parents[1] / "benchmarks" / "bench_kernels.py"


@needs_numba
def test_benchmark_runs_and_paths_agree(tmp_path, capsys):
    spec = importlib.util.spec_from_file_location("bench_kernels", BENCH)
    bench = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(bench)
    res = bench.main(["--repeat", "1", "--evals", "1", "--json", str(tmp_path / "b.json")])
    assert all(row["agree"] for row in res["kernels"])
    assert set(res["metric"]) == {"numba", "numpy"}
    assert res["metric"]["numba"]["value"] == res["metric"]["numpy"]["value"]
    assert json.loads((tmp_path / "b.json").read_text()) == res
