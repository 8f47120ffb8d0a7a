"""Time the compiled kernels against the numpy fallback, plus one full planning cycle on each.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import subprocess
import sys
import timeit

import numpy as np

from jointplan import _pykernels
from jointplan.inference import PairwiseMRF

try:
    from jointplan import _ckernels
except ImportError:
    _ckernels = None

CYCLE = """
import timeit

import numpy as np
from jointplan import _backend
from jointplan.energy import AgentObservation, PlanningContext, default_weights
from jointplan.geometry import Lane, Polyline
from jointplan.planner import plan
from jointplan.trajectory import KinematicState, SamplerProfile, sample_candidates

rng = np.random.default_rng(0)
lanes = tuple(Lane(Polyline(np.array([[-100.0, y], [200.0, y]])), 3.5) for y in (0.0, 3.5))
ego = KinematicState(0.0, 0.0, 0.0, 6.0)
agents = [KinematicState(float(x), float(y), 0.0, float(rng.uniform(3, 9)))
          for x, y in [(-20, 0), (12, 0), (24, 0), (-15, 3.5), (-5, 3.5), (6, 3.5), (16, 3.5), (28, 3.5)]]
route = Polyline(np.array([[-100.0, 0.0], [200.0, 0.0]]))
ctx = PlanningContext(AgentObservation(ego), tuple(AgentObservation(a) for a in agents), route, lanes)
prof = SamplerProfile(k=12)
w = default_weights()

def cycle():
    sets = [sample_candidates(o.state, prof, lanes) for o in ctx.observations]
    plan(ctx, sets, w, "interactive")

cycle()
t = min(timeit.repeat(cycle, number=1, repeat={repeat}))
print(_backend.BACKEND, t)
"""


def poses(rng, a, t):
    return np.concatenate([rng.uniform(-20, 20, size=(a, t, 2)), rng.uniform(-np.pi, np.pi, size=(a, t, 1))], axis=-1)


def cases(rng):
    pa, pb = poses(rng, 12, 9), poses(rng, 12, 9)
    scale = rng.uniform(0, 5, size=(12, 9))
    box = (4.5, 2.0, 4.5, 2.0)
    n, k = 9, 12
    edges = [(i, j) for i in range(n) for j in range(i + 1, n)]
    mrf = PairwiseMRF(np.zeros((n, k)), {e: rng.uniform(-2, 2, size=(k, k)) for e in edges})
    src, dst, rev, psi = mrf.directed()
    u = rng.uniform(-2, 2, size=(k, n, k))
    return {
        "rect_gaps 12x12x9": lambda m: m.rect_gaps(pa, pb, *box),
        "safety_matrix 12x12x9": lambda m: m.safety_matrix(pa, scale, pb, *box, 2.0, 1e4),
        "lbp_batch 12 runs, 9 nodes, K=12": lambda m: m.lbp_batch(u, src, dst, rev, psi, 0.5, 1e-6, 50),
    }


def bench(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def cycle_time(pure: bool, repeat: int) -> tuple:
    env = dict(__import__("os").environ)
    env.pop("JOINTPLAN_PURE_PYTHON", None)
    if pure:
        env["JOINTPLAN_PURE_PYTHON"] = "1"
    out = subprocess.run([sys.executable, "-c", CYCLE.format(repeat=repeat)], env=env, capture_output=True,
                         text=True, check=True).stdout.split()
    return out[0], float(out[1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled kernels are not built; only the fallback can be timed")
    rows = []
    for name, fn in cases(np.random.default_rng(0)).items():
        py = bench(lambda: fn(_pykernels), args.repeat)
        cy = bench(lambda: fn(_ckernels), args.repeat) if _ckernels else float("nan")
        rows.append((name, py, cy))
    cy_backend, cy_cycle = cycle_time(False, args.repeat)
    _, py_cycle = cycle_time(True, args.repeat)
    rows.append((f"planning cycle K=12 N=8 ({cy_backend} vs python)", py_cycle, cy_cycle))
    width = max(len(r[0]) for r in rows)
    print(f"{'case':<{width}}  {'python ms':>10}  {'compiled ms':>11}  {'speedup':>7}")
    for name, py, cy in rows:
        print(f"{name:<{width}}  {py * 1e3:>10.3f}  {cy * 1e3:>11.3f}  {py / cy:>6.1f}x")


if __name__ == "__main__":
    main()
