"""Compare the compiled and pure-Python kernel backends.

Times DRR rendering and batched trilinear sampling on the synthetic phantom
and checks that both backends agree bit for bit.

    python3 benchmarks/bench_kernels.py [--size 128] [--det 128] [--repeat 3] [--json out.json]
"""

import argparse
import json
import sys
import time

import numpy as np

from carmreg import _backend
from carmreg.drr import DRRRenderer
from carmreg.geom import CArmPose, DetectorSpec, carm_extrinsics
from carmreg.volume import PhantomSpec, make_phantom


def best_of(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=128, help="phantom voxels per axis")
    ap.add_argument("--det", type=int, default=128, help="detector pixels per side")
    ap.add_argument("--samples", type=int, default=200_000, help="trilinear sample points")
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--threads", type=int, default=None)
    ap.add_argument("--json", default=None, help="write results here")
    args = ap.parse_args(argv)

    if "compiled" not in _backend.BACKENDS:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`", file=sys.stderr)
        return 1
    spacing = 382.5 / (args.size - 1)
    vol, _ = make_phantom(PhantomSpec(dims=(args.size,) * 3, spacing_mm=(spacing,) * 3), seed=0)
    det = DetectorSpec(args.det, args.det, 0.5 * 512 / args.det)
    model = carm_extrinsics(CArmPose(1.0, 30.0, -5.0, 1000.0, 750.0, tuple(vol.centroid_mm)), det)

    rng = np.random.default_rng(0)
    idx = rng.uniform(0, args.size - 1, (args.samples, 3))
    mu = np.ascontiguousarray(DRRRenderer(vol).mu, dtype=np.float32)

    rows = []
    results = {}
    for name in ("compiled", "python"):
        r = DRRRenderer(vol, backend=name)
        t_render, img = best_of(lambda: r.render(model, threads=args.threads).pixels, args.repeat)
        t_tri, vals = best_of(lambda: _backend.trilinear_many(mu, idx, backend=name), args.repeat)
        results[name] = (img, vals)
        rows.append({"backend": name, "render_s": t_render, "trilinear_s": t_tri})

    identical = (np.array_equal(results["compiled"][0], results["python"][0])
                 and np.array_equal(results["compiled"][1], results["python"][1]))
    c, p = rows
    print(f"phantom {args.size}^3, detector {args.det}x{args.det}, {args.samples} samples, "
          f"best of {args.repeat}")
    print(f"{'backend':<10}{'render (s)':>12}{'trilinear (s)':>15}")
    for row in rows:
        print(f"{row['backend']:<10}{row['render_s']:>12.4f}{row['trilinear_s']:>15.4f}")
    print(f"speedup   {p['render_s'] / c['render_s']:>11.1f}x{p['trilinear_s'] / c['trilinear_s']:>14.1f}x")
    print(f"outputs bit-identical: {identical}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"config": vars(args), "rows": rows, "identical": identical}, fh, indent=2)
    return 0 if identical else 2


if __name__ == "__main__":
    sys.exit(main())
