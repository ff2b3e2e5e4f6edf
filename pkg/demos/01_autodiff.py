"""Reverse-mode autodiff on an explicit tape, checked against finite differences."""
# %%
import numpy as np

from raterseg.autodiff import Tape, Tensor, finite_diff_check

# Every forward pass records onto its own tape. Leaves that need gradients say so.
x = Tensor(np.array(3.0), requires_grad=True)
tape = Tape()
y = tape.mul(x, x)
grads = tape.backward(y)
print("d(x^2)/dx at 3:", grads[x])  # 6.0

# %% A small convolution with a ReLU and a mean, the building block of the U-Net
rng = np.random.default_rng(0)
image = Tensor(rng.uniform(-1, 1, (1, 2, 6, 6)), requires_grad=True, dtype=np.float64)
kernel = Tensor(rng.uniform(-1, 1, (3, 2, 3, 3)), requires_grad=True, dtype=np.float64)


def loss(t, img, k):
    return t.mean(t.relu(t.conv2d(img, k, padding=1)))


tape = Tape()
value = loss(tape, image, kernel)
g = tape.backward(value)
print("loss", float(value.data), "kernel grad norm", np.linalg.norm(g[kernel]))

# %% The finite-difference oracle recomputes the loss with each element nudged by +-eps
err = finite_diff_check(loss, [image, kernel], eps=1e-6)
print(f"max relative error vs central differences: {err:.2e}")

# %% A tape is consumed by backward; a second call is an error
try:
    tape.backward(value)
except RuntimeError as exc:
    print("second backward:", exc)
