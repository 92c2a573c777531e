import numpy as np

from symreg.geometry import PointCloud


def random_cloud(rng, n, scale=1.0, id=""):
    return PointCloud(rng.uniform(-scale, scale, size=(n, 3)), id)


def rz(deg):
    t = np.radians(deg)
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def run_cli(argv):
    """Run the CLI in-process; returns (exit code, stdout, stderr)."""
    import contextlib
    import io

    from symreg.harness.cli import main

    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


PIPELINE_SPEC = {
    "family": "chair_like",
    "symmetry_classes": 2,
    "models": 4,
    "queries": 2,
    "points": 300,
    "noise_sigma": 0.005,
    "evaluation": {"ransac": {"iterations": 300}, "k": 3},
}


def run_pipeline(workdir, seed=0, threads=1):
    """Every CLI command in sequence inside ``workdir``.

    Returns ``{name: bytes}`` covering each command's stdout and every file
    the run left in ``workdir``.
    """
    import json
    from pathlib import Path

    w = Path(workdir)
    w.mkdir(parents=True, exist_ok=True)
    (w / "spec.json").write_text(json.dumps(PIPELINE_SPEC))
    common = ["--seed", seed, "--threads", threads]
    q, m = w / "ds/queries/query_000.ply", w / "ds/models/model_000.ply"
    commands = {
        "synth": ["synth", w / "spec.json", "--out", w / "ds"],
        "extract": ["extract", q, "--out", w / "q.crsf", "--embedding-out", w / "q_emb.crsf"],
        "index": ["index", w / "ds/manifest.json", "--out", w / "idx"],
        "retrieve": ["retrieve", q, w / "idx", "-m", 3],
        "retrieve_table": ["retrieve", q, w / "idx", "-m", 3, "--format", "table", "--features", w / "q.crsf"],
        "register": ["register", q, m, "--symmetry", 2, "--iterations", 300, "--labels-out", w / "labels.ply"],
        "register_table": ["register", q, m, "--iterations", 300, "--format", "table"],
        "evaluate": ["evaluate", w / "ds/eval.json", "--out", w / "report.json"],
        "evaluate_table": ["evaluate", w / "ds/eval.json", "--format", "table"],
    }
    outputs = {}
    for name, argv in commands.items():
        code, out, err = run_cli(argv + common)
        if code != 0:
            raise AssertionError(f"{name} exited {code}: {err}")
        outputs[f"stdout:{name}"] = out.encode()
    for p in sorted(w.rglob("*")):
        if p.is_file():
            outputs[str(p.relative_to(w))] = p.read_bytes()
    return outputs


ACCEPTANCE = {}


class criterion:
    """Context manager recording one acceptance criterion as PASS or FAIL.

    The block passes if it raises nothing and finishes within ``limit`` seconds.
    """

    def __init__(self, number, title, limit=None):
        self.number, self.title, self.limit = number, title, limit

    def __enter__(self):
        import time

        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        import time

        elapsed = time.perf_counter() - self.start
        ok = exc_type is None and (self.limit is None or elapsed < self.limit)
        note = f"{elapsed:.1f}s" + (f" (limit {self.limit:g}s)" if self.limit else "")
        if exc_type is not None:
            note += f": {exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        line = f"{'PASS' if ok else 'FAIL'} criterion {self.number:2d} {self.title} [{note}]"
        ACCEPTANCE[self.number] = line
        print(line)
        if exc_type is None and not ok:
            raise AssertionError(f"criterion {self.number} exceeded its runtime limit: {elapsed:.1f}s")
        return False
