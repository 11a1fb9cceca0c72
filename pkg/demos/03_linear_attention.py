"""Linear attention: the accumulator form against the quadratic reference.

The positive feature map phi(x) = elu(x) + 1 turns attention into two
matrix products: key-side accumulators are built once, then every query
reads them, so cost grows additively in queries and keys instead of
multiplicatively. This demo shows exact agreement with the quadratic-cost
formula, the convex-hull property of the outputs, and the speed crossover.
"""

import time

import numpy as np

from monopgc import dsat
from monopgc.numerics import Tensor

rng = np.random.default_rng(0)

print("agreement with the quadratic-cost reference:")
for n, m, e in ((3, 3, 8), (64, 32, 16), (400, 400, 32)):
    q = Tensor(rng.standard_normal((n, e)))
    k = Tensor(rng.standard_normal((m, e)))
    v = Tensor(rng.standard_normal((m, e)))
    fast = dsat.linear_attention(q, k, v).data
    ref = dsat.linear_attention_reference(q, k, v)
    print(f"  N={n:4d} M={m:4d} E={e:2d}: max |diff| = {np.abs(fast - ref).max():.2e}")

print("\nsingle key: every query returns the value row")
q = Tensor(rng.standard_normal((4, 6)))
k = Tensor(rng.standard_normal((1, 6)))
v = Tensor(np.array([[1.0, 2.0, 3.0]]))
print(" ", np.round(dsat.linear_attention(q, k, v).data, 6))

print("\nconvex hull: outputs never leave the per-coordinate value range")
k = Tensor(rng.standard_normal((32, 6)))
v = Tensor(rng.standard_normal((32, 3)))
out = dsat.linear_attention(Tensor(rng.standard_normal((100, 6))), k, v).data
print(f"  values span [{v.data.min():.3f}, {v.data.max():.3f}], "
      f"outputs span [{out.min():.3f}, {out.max():.3f}]")

print("\ntiming, accumulator vs quadratic (value width 32):")
for n in (256, 1024, 4096):
    q = Tensor(rng.standard_normal((n, 32)))
    k = Tensor(rng.standard_normal((n, 32)))
    v = Tensor(rng.standard_normal((n, 32)))
    t0 = time.perf_counter()
    dsat.linear_attention(q, k, v)
    t1 = time.perf_counter()
    dsat.linear_attention_reference(q, k, v)
    t2 = time.perf_counter()
    print(f"  N=M={n:5d}: accumulator {1e3 * (t1 - t0):7.2f} ms, "
          f"quadratic {1e3 * (t2 - t1):7.2f} ms")
