"""Compiled vs numpy kernels, plus one training step of each model at desk scale.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints microseconds per call (best of ``--repeat`` runs) and the speedup of
the compiled backend. Exits quietly with a note if the extension is missing.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from sparsemotion import kernels
from sparsemotion.kinematics import default_skeleton, random_rotations


def best_us(fn, repeat):
    n, _ = timeit.Timer(fn).autorange()
    return min(timeit.repeat(fn, number=n, repeat=repeat)) / n * 1e6


def kernel_cases(rng):
    sk = default_skeleton()
    J = sk.n_joints
    cases = []
    for n in (1, 960):
        x = rng.normal(size=(n * J, 6))
        cases.append((f"rot6d decode   N={n * J}", lambda impl, x=x: impl.rot6d_to_matrix(x)))
        local = random_rotations(n * J, rng).reshape(n, J, 3, 3)
        root = rng.normal(size=(n, 3))
        cases.append((f"fk forward     N={n}", lambda impl, a=local, r=root:
                       impl.fk_forward(a, r, sk.offsets, sk.parents)))
        grot, _ = kernels.fk_forward(local, root, sk.offsets, sk.parents)
        g_rot, g_pos = rng.normal(size=grot.shape), rng.normal(size=(n, J, 3))
        cases.append((f"fk backward    N={n}", lambda impl, a=local, gr=grot, g1=g_rot, g2=g_pos:
                       impl.fk_backward(a, gr, sk.offsets, sk.parents, g1, g2)))
    for B, H in ((1, 96), (120, 96)):
        a0 = rng.normal(size=(B, 4 * H))
        c_prev = rng.normal(size=(B, H))
        bufs = [np.empty((B, H)) for _ in range(3)]

        def fwd(impl, a0=a0, c_prev=c_prev, bufs=bufs):
            impl.lstm_cell_forward(a0.copy(), c_prev, *bufs)

        dh, dz = rng.normal(size=(B, H)), np.empty((B, 4 * H))

        def bwd(impl, a0=a0, c_prev=c_prev, bufs=bufs, dh=dh, dz=dz):
            impl.lstm_cell_backward(a0, c_prev, bufs[1], dh, dh.copy(), dz)

        cases.append((f"lstm cell fwd  B={B} H={H}", fwd))
        cases.append((f"lstm cell bwd  B={B} H={H}", bwd))
    return cases


STEP_SNIPPET = """
import time, numpy as np
from sparsemotion.kinematics import default_skeleton
from sparsemotion.dataio import SynthConfig, synth_generate
from sparsemotion.prior import FullPriorTrainer, TrainConfig, FullMotionPrior, SparseMotionEncoder, PriorConfig
from sparsemotion.sequence import SequenceTrainer, SequenceTrainConfig
sk = default_skeleton()
clips = synth_generate(SynthConfig(classes={"walk": 1, "kick": 1}), 0)
model = dict(d_model=64, n_heads=4, d_ff=128, n_enc_layers=2, n_dec_layers=2, memory_tokens=8)
pt = FullPriorTrainer(clips, sk, TrainConfig(batch_size=16, model=model), seed=0)
pt.train(2); t = time.perf_counter(); pt.train(6); a = (time.perf_counter() - t) / 6
enc = SparseMotionEncoder(PriorConfig(**model), 1)
st = SequenceTrainer(clips, sk, enc, pt.module, SequenceTrainConfig(batch_size=2, model=dict(hidden=96, seq_len=40)), seed=0)
st.train(1); t = time.perf_counter(); st.train(4); b = (time.perf_counter() - t) / 4
print(f"{a * 1e3:.1f} {b * 1e3:.1f}")
"""


def train_steps(pure):
    env = dict(os.environ, SPARSEMOTION_PURE_PYTHON="1" if pure else "0")
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET], env=env, capture_output=True, text=True, check=True)
    return [float(v) for v in out.stdout.split()]


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-training", action="store_true", help="kernel timings only")
    args = ap.parse_args()
    impls = kernels.implementations()
    if "cython" not in impls:
        print("compiled extension not built; run `python setup.py build_ext --inplace` first")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} {'numpy us':>10s} {'cython us':>10s} {'speedup':>8s}")
    for name, fn in kernel_cases(rng):
        py = best_us(lambda: fn(impls["python"]), args.repeat)
        cy = best_us(lambda: fn(impls["cython"]), args.repeat)
        print(f"{name:28s} {py:10.1f} {cy:10.1f} {py / cy:7.2f}x")
    if not args.skip_training:
        py, cy = train_steps(True), train_steps(False)
        print()
        print(f"{'training step':28s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
        for i, name in enumerate(("full prior (B=16, d=64)", "sequence (2x60 frames, H=96)")):
            print(f"{name:28s} {py[i]:10.1f} {cy[i]:10.1f} {py[i] / cy[i]:7.2f}x")


if __name__ == "__main__":
    main()
