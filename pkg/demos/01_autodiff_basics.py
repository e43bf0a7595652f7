"""Reverse-mode autodiff on volumes: a 3D convolution, its transpose, and a finite-difference check.

Run: python demos/01_autodiff_basics.py
"""

import numpy as np

from volseg3d.autodiff import Adam, Tensor, conv3d, conv_transpose3d, mse_loss

rng = np.random.default_rng(0)

# A 3x3x3 convolution with padding 1 keeps the spatial shape.
x = Tensor(rng.standard_normal((1, 2, 8, 8, 8)), requires_grad=True)
w = Tensor(rng.standard_normal((4, 2, 3, 3, 3)), requires_grad=True)
y = conv3d(x, w, None, stride=1, padding=1)
print("conv3d output shape:", y.shape)

# The transposed convolution is the adjoint: <conv(x), g> == <x, conv_T(g)>.
g = rng.standard_normal(y.shape)
lhs = float((y.data * g).sum())
rhs = float((x.data * conv_transpose3d(Tensor(g), w, None, 1, 1).data).sum())
print(f"adjoint check: {lhs:.10f} vs {rhs:.10f}")

# Gradient of a scalar loss, compared with a central difference on one weight.
target = rng.standard_normal(y.shape)
loss = mse_loss(conv3d(x, w, None, 1, 1), target)
loss.backward()
i = (1, 0, 1, 2, 0)
h = 1e-5
w.data[i] += h
up = mse_loss(conv3d(Tensor(x.data), Tensor(w.data), None, 1, 1), target).item()
w.data[i] -= 2 * h
down = mse_loss(conv3d(Tensor(x.data), Tensor(w.data), None, 1, 1), target).item()
w.data[i] += h
print(f"dL/dw{i}: analytic {w.grad[i]:.8f}, numeric {(up - down) / (2 * h):.8f}")

# A few Adam steps fit the weights towards the target.
opt = Adam({"w": w}, lr=0.05)
for step in range(30):
    opt.zero_grad()
    loss = mse_loss(conv3d(x, w, None, 1, 1), target)
    loss.backward()
    opt.step()
    if step % 10 == 0:
        print(f"step {step:2d}  loss {loss.item():.4f}")
