"""Benchmark the compiled trajectory kernel against the numpy fallback.

Runs the bundled example (heterodyne monitoring, current feedback)
through both backends in subprocesses and reports wall time and
steps/second.  The two backends must agree on the ensemble averages
to round-off; the final column shows the worst deviation.

Usage: python benchmarks/bench_kernel.py [--trajectories N] [--t-final X]
"""

import argparse
import json
import os
import subprocess
import sys

_WORKER = r"""
import json, os, sys, time
import numpy as np
import unravelopt as uo
from unravelopt.simulator import BACKEND_NAME, SimConfig, simulate_conditional

n_traj = int(sys.argv[1])
t_final = float(sys.argv[2])
spec = uo.SystemSpec(hbar=1.0, G=[[0, 1], [1, 0]], C_re=[[1, 0]], C_im=[[0, 1]], B=np.eye(2))
model = uo.derive_moment_model(spec)
fm = uo.filter_model(model, uo.heterodyne(1))
control = uo.ControlProblem(P=[[1, -1], [-1, 1]], Q=None, B=np.eye(2))
design = uo.design_markovian(uo.solve_filter_care(fm).X, fm, control)
cfg = SimConfig(dt=1e-3, t_final=t_final, n_traj=n_traj, seed=123)
t0 = time.perf_counter()
result = simulate_conditional(spec, fm, design, cfg)
wall = time.perf_counter() - t0
print(json.dumps({
    "backend": result.backend,
    "wall": wall,
    "steps": cfg.n_steps * n_traj,
    "xx_avg": result.xx_avg.mean(axis=0).tolist(),
}))
"""


def run_backend(name, n_traj, t_final):
    env = dict(os.environ, UNRAVELOPT_BACKEND=name)
    out = subprocess.run(
        [sys.executable, "-c", _WORKER, str(n_traj), str(t_final)],
        env=env,
        capture_output=True,
        text=True,
        check=True,
    )
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--trajectories", type=int, default=500)
    parser.add_argument("--t-final", type=float, default=10.0)
    args = parser.parse_args()

    rows = []
    for name in ("python", "cython"):
        try:
            rows.append(run_backend(name, args.trajectories, args.t_final))
        except subprocess.CalledProcessError as exc:
            print("backend %s unavailable:\n%s" % (name, exc.stderr.strip()))
    if not rows:
        return 1

    import numpy as np

    print("%-10s %10s %14s %12s" % ("backend", "wall [s]", "steps/s", "max |dx|"))
    ref = np.asarray(rows[0]["xx_avg"])
    for row in rows:
        dev = float(np.abs(np.asarray(row["xx_avg"]) - ref).max())
        print(
            "%-10s %10.3f %14.3e %12.3e"
            % (row["backend"], row["wall"], row["steps"] / row["wall"], dev)
        )
    if len(rows) == 2:
        print(
            "speedup: %.2fx (%s over %s)"
            % (rows[0]["wall"] / rows[1]["wall"], rows[1]["backend"], rows[0]["backend"])
        )
    return 0


if __name__ == "__main__":
    sys.exit(main())
