"""Train the tiny network along a lambda ladder and print an RD table.

Each lambda starts from the previous model.  Rate is counted as coded
payload plus the per-cube k field, distortion as D1 PSNR of the decoded
cubes; a second column decodes with a fixed 0.5 threshold for comparison.

    python demos/desk_rd.py [--steps 2000] [--cubes 200]

Expect roughly 3 minutes per lambda at 2000 steps on one core.
"""

import argparse
import time

import numpy as np

from voxcodec.codec import analyze_cube, classify_fixed, classify_topk, cube_probabilities
from voxcodec.codec import k_field_width
from voxcodec.metrics import d1_mse, psnr
from voxcodec.trainer import TrainConfig, gen_synthetic_dataset, train_ladder

W = 16


def rd_point(model, cubes):
    bits = pts = 0
    mse_top, mse_fix, iou = [], [], []
    for occ in cubes:
        a = analyze_cube(occ, model)
        p = cube_probabilities(a.y_hat, model)
        k = int(occ.sum())
        top = classify_topk(p, k)
        fix = classify_fixed(p)
        bits += 8 * a.payload.payload_bytes + k_field_width(W)
        pts += k
        ref = np.argwhere(occ)
        mse_top.append(d1_mse(ref, np.argwhere(top)))
        if fix.any():
            mse_fix.append(d1_mse(ref, np.argwhere(fix)))
        iou.append((occ & top).sum() / (occ | top).sum())
    # 4-bit peak: cube-local coordinates span 0..15
    return bits / pts, psnr(np.mean(mse_top), 4), psnr(np.mean(mse_fix), 4), np.mean(iou)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--cubes", type=int, default=200)
    ap.add_argument("--lambdas", default="16,4,0.75")
    args = ap.parse_args()

    lambdas = [float(v) for v in args.lambdas.split(",")]
    train_set = gen_synthetic_dataset(1, args.cubes, W)
    held = [s.occupancy for s in gen_synthetic_dataset(2, 20, W)]
    cfg = TrainConfig(lam=lambdas[0], lr=5e-3, lr_end=3e-4, steps=args.steps, cube_size=W,
                      net="tiny", augment=True)
    t = time.time()
    models, hist = train_ladder(cfg, train_set, lambdas)
    print(f"trained {len(lambdas)} models in {time.time() - t:.0f} s")
    print("lambda   J first->last     bpov    D1 top-k  D1 fixed-0.5  IoU")
    for lam in lambdas:
        bpov, q_top, q_fix, iou = rd_point(models[lam], held)
        h = hist[lam]
        print(f"{lam:6g}  {h[0]['J']:7.2f}->{h[-1]['J']:6.2f}  {bpov:7.3f}  {q_top:8.2f}"
              f"  {q_fix:12.2f}  {iou:.3f}")


if __name__ == "__main__":
    main()
