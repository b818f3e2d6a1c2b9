import importlib.util
from pathlib import Path


def test_benchmark_runs_and_backends_agree(capsys, monkeypatch):
    path = Path(__file__).parents[1] / "benchmarks" / "bench_kernels.py"
    spec = importlib.util.spec_from_file_location("bench_kernels", path)
    bench = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(bench)
    monkeypatch.setitem(bench.SIZES, "small", {"moments": 2000, "groups": 4, "label": (4, 8, 8), "gap": (8, 40)})
    bench.main(["--repeat", "1"])
    out = capsys.readouterr().out
    assert out.count("ms") >= 3 and "label3d" in out
