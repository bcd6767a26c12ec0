"""Tour of the tensor kernel: build a small graph, run the reverse pass,
and confirm the analytic gradients against central finite differences.

Run:  python3 demos/01_autodiff_and_gradcheck.py
"""

import numpy as np

from dualcam.autodiff import (Tensor, backward, conv2d, global_avg_pool,
                              linear, relu, stop_gradient)
from dualcam.gradcheck import gradcheck

rng = np.random.default_rng(0)

print("== a tiny conv -> relu -> pool -> linear graph ==")
x = Tensor(rng.standard_normal((2, 3, 8, 8)), requires_grad=True)
w = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.4, requires_grad=True)
b = Tensor(np.zeros(4), requires_grad=True)
wl = Tensor(rng.standard_normal((5, 4)) * 0.4, requires_grad=True)
bl = Tensor(np.zeros(5), requires_grad=True)

hidden = relu(conv2d(x, w, b, stride=2, padding=1))
logits = linear(global_avg_pool(hidden), wl, bl)
loss = logits.sum()
print(f"loss = {loss.item():.6f}")

backward(loss)
print(f"grad shapes: x {x.grad.shape}, w {w.grad.shape}, wl {wl.grad.shape}")

print("\n== the same graph, checked against finite differences ==")
def f(xx, ww, bb, wwl, bbl):
    return linear(global_avg_pool(relu(conv2d(xx, ww, bb, stride=2, padding=1))),
                  wwl, bbl).sum()

result = gradcheck(f, [x.data, w.data, b.data, wl.data, bl.data])
print(f"fraction within 1e-3: {result.fraction_within_tol:.3f}  "
      f"max rel err: {result.max_rel_err:.2e}  ({result.n_checked} coords)")

print("\n== stop-gradient: the detached factor contributes no adjoint ==")
y = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
backward((stop_gradient(y) * y).sum())
print("d/dy sum(sg(y) * y) equals y itself:",
      bool(np.allclose(y.grad, y.data)))

print("\n== a second backward without a fresh forward is rejected ==")
z = Tensor(np.ones(3), requires_grad=True)
loss2 = (z * 2.0).sum()
backward(loss2)
try:
    backward(loss2)
except Exception as exc:
    print(f"raised {type(exc).__name__}: {exc}")
