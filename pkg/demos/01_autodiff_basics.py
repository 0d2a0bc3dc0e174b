"""A first look at the tensor engine.

Run with ``python demos/01_autodiff_basics.py``.
"""
import numpy as np

from cinformer import autodiff as ad
from cinformer.gradcheck import check_gradients

# Tensors wrap numpy arrays.  Arithmetic records a tape, and backward() walks it
# in reverse.
x = ad.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
w = ad.Tensor(np.array([[1.0], [-0.25]]), requires_grad=True)
h = ad.relu(x @ w)
y = ad.reduce_sum(h * h)
y.backward()
print("y       =", y.data)
print("dy/dx   =\n", x.grad)
print("dy/dw   =\n", w.grad)

# The graph is freed after backward, so a second call is an error rather than
# silently doubled gradients.
try:
    y.backward()
except Exception as exc:
    print("second backward:", type(exc).__name__, exc)

# Central finite differences confirm the analytic gradient.  Checks run in
# float64; the model itself trains in float32.
res = check_gradients(lambda a: ad.reduce_sum(ad.softmax(a, axis=-1) * ad.sigmoid(a)),
                      {"a": np.random.default_rng(0).standard_normal((3, 5))}, name="softmax*sigmoid")
print(f"{res.name}: max rel err {res.max_rel_err:.2e} -> {'PASS' if res.passed else 'FAIL'}")
