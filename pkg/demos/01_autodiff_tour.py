"""A short tour of the tape-based autodiff that everything else is built on.

Run:  python demos/01_autodiff_tour.py
"""

import numpy as np

from feainf import tensor as tn

# %% A graph is any function of named Tensors returning a scalar.
g = tn.Graph(lambda x: x * x * x)
g.forward(x=2.0)
print("x^3 at 2:", g.output.item(), " d/dx:", g.gradient()["x"])  # 8.0, 12.0

# %% Convolutions, relu and pooling compose like numpy code.
rng = np.random.default_rng(0)
w = rng.normal(scale=0.3, size=(3, 3, 1, 4))
b = rng.uniform(0.01, 0.1, size=4)
net = tn.Graph(lambda img, w, b: tn.relu(tn.conv2d(img, w, b, stride=2, padding=1)).mean())
net.forward(img=rng.uniform(size=(2, 16, 16, 1)), w=w, b=b)
grads = net.gradient(["w", "b"])
print("conv grad shapes:", grads["w"].shape, grads["b"].shape)

# %% Checking gradients against central differences.
# A relu net is only piecewise smooth: a probe that steps over a kink
# measures the wrong slope.  Every relu/abs/clip/max/min records which
# piece it took, so the checker can spot a straddling probe and shrink
# its step for that coordinate.
print("plain check    :", tn.finite_diff_check(net, "b", h=1e-2))
print("kink-aware     :", tn.finite_diff_check(net, "b", h=1e-2, min_h=1e-8))
print("pieces recorded:", [op for op, _ in net.branches()])

# %% Adam on a toy quadratic.
x = {"x": np.array(0.0)}
state = tn.AdamState()
for _ in range(100):
    x = tn.adam_step(x, {"x": 2 * (x["x"] - 3.0)}, 0.1, state)
print("argmin of (x-3)^2 after 100 Adam steps: %.3f" % x["x"])
