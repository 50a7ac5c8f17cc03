"""Compiled vs numpy kernels, and one training step under each backend.

    python benchmarks/bench_kernels.py [--repeat N] [--skip-step]

Timings are medians in milliseconds. The training-step rows run in child
processes so the fallback can be forced with CRM_PURE_PYTHON=1.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from crm import _kernels_py as py

try:
    from crm import _kernels as cy
except ImportError:
    cy = None

# (batch, height, width, cin, k, cout): backbone input, backbone middle,
# refinement stage input, refinement hidden, 1x1 head
LAYERS = [
    (2, 96, 160, 3, 3, 16),
    (2, 48, 80, 16, 3, 32),
    (2, 24, 40, 40, 7, 16),
    (2, 24, 40, 16, 7, 16),
    (2, 24, 40, 32, 1, 8),
    (2, 24, 40, 64, 7, 64),
]

STEP = """
import time, numpy as np
from crm.data import SyntheticConfig, generate_synthetic
from crm.model import CrmConfig, crm_forward, init_params
from crm.training import LossWeights, loss_total, onehot, truth_maps
from crm import tensor as tt
ds = generate_synthetic(SyntheticConfig(scenes=4, seed=0))
w = 16
cfg = CrmConfig(stages=4, phi_widths=(w, w, w, 2 * w), psi_widths=(w, w, w, 2 * w), zeta_widths=(w, w, w))
p = init_params(cfg)
T = truth_maps(ds, cfg)
idx = np.arange(4)
clip = ds.clip(idx)
def step():
    out = crm_forward(clip, p, cfg)
    tt.backward(loss_total(out.stage_maps, T[idx], out.probs, onehot(ds.groups()[idx], 4), LossWeights(1e-4, 1)))
    for v in p.values():
        v.zero_grad()
step()
ts = []
for _ in range({repeat}):
    t = time.perf_counter(); step(); ts.append(time.perf_counter() - t)
print(1000 * float(np.median(ts)))
"""


def median_ms(fn, repeat):
    fn()
    return 1000 * float(np.median(timeit.repeat(fn, number=1, repeat=repeat)))


def pad(a, k):
    p = (k - 1) // 2
    return np.pad(a, ((0, 0), (p, p), (p, p), (0, 0)))


def bench_layers(repeat):
    rng = np.random.default_rng(0)
    print(f"{'layer (B,H,W,Cin,k,Cout)':<28}{'op':<10}{'numpy':>10}{'cython':>10}{'direct':>10}")
    for B, H, W, C, k, Co in LAYERS:
        x = rng.normal(size=(B, H, W, C))
        w = rng.normal(size=(k, k, C, Co))
        b = rng.normal(size=Co)
        g = rng.normal(size=(B, H, W, Co))
        wm = w.reshape(-1, Co)
        flipped = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
        rows = {
            "forward": (
                lambda m: (lambda: m.im2col(x, k) @ wm + b),
                lambda: cy.conv2d_padded(pad(x, k), w, b),
            ),
            "grad-x": (
                lambda m: (lambda: m.col2im(np.ascontiguousarray(g.reshape(-1, Co) @ wm.T), B, H, W, C, k)),
                lambda: cy.conv2d_padded(pad(g, k), flipped, np.zeros(C)),
            ),
            "grad-w": (
                lambda m: (lambda: m.im2col(x, k).T @ g.reshape(-1, Co)),
                lambda: cy.conv2d_weight_grad_padded(pad(x, k), g, k),
            ),
        }
        for op, (gemm, direct) in rows.items():
            t_py = median_ms(gemm(py), repeat)
            t_cy = median_ms(gemm(cy), repeat) if cy else float("nan")
            t_d = median_ms(direct, repeat) if cy else float("nan")
            print(f"{str((B, H, W, C, k, Co)):<28}{op:<10}{t_py:>10.2f}{t_cy:>10.2f}{t_d:>10.2f}")
    x = rng.normal(size=(8, 96, 160, 16))
    t_py = median_ms(lambda: py.maxpool2_forward(x), repeat)
    t_cy = median_ms(lambda: cy.maxpool2_forward(x), repeat) if cy else float("nan")
    print(f"{str((8, 96, 160, 16)):<28}{'maxpool':<10}{t_py:>10.2f}{t_cy:>10.2f}{'-':>10}")


def bench_step(repeat):
    print("\ntraining step, batch 4, T = 4, widths 16 (median ms)")
    for label, env in (("numpy fallback", {"CRM_PURE_PYTHON": "1"}), ("compiled", {})):
        full_env = {k: v for k, v in os.environ.items() if k != "CRM_PURE_PYTHON"}
        full_env.update(env)
        out = subprocess.run(
            [sys.executable, "-c", STEP.replace("{repeat}", str(repeat))],
            env=full_env, capture_output=True, text=True, check=True,
        )
        print(f"  {label:<16}{float(out.stdout):>10.1f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-step", action="store_true")
    args = ap.parse_args()
    if cy is None:
        print("compiled kernels not built; only the numpy column is meaningful")
    bench_layers(args.repeat)
    if not args.skip_step:
        bench_step(args.repeat)


if __name__ == "__main__":
    main()
