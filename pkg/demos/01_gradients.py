"""Build a small graph with the autograd engine and check it against finite differences."""

import numpy as np

from drpc import tensor as T

rng = np.random.default_rng(0)
x = T.parameter(rng.normal(size=(1, 2, 6, 6)), name="x")
k = T.parameter(rng.normal(size=(3, 2, 3, 3)), name="k")
b = T.parameter(rng.normal(size=3), name="b")
labels = rng.integers(0, 3, size=(1, 6, 6))

# conv -> relu -> upsample -> per-pixel cross-entropy
loss = T.cross_entropy(T.resize2d(T.relu(T.conv2d(x, k, b, pad=1)), 12, 12), np.kron(labels, np.ones((2, 2), int)))
loss.backward()
print(f"loss {loss.item():.6f}")


def value():
    h = T.relu(T.conv2d(T.Tensor(x.data), T.Tensor(k.data), T.Tensor(b.data), pad=1))
    return T.cross_entropy(T.resize2d(h, 12, 12), np.kron(labels, np.ones((2, 2), int))).item()


eps = 1e-5
for name, p in (("x", x), ("k", k), ("b", b)):
    flat = p.data.reshape(-1)
    i = int(rng.integers(flat.size))
    old = flat[i]
    flat[i] = old + eps
    hi = value()
    flat[i] = old - eps
    lo = value()
    flat[i] = old
    num = (hi - lo) / (2 * eps)
    print(f"d loss / d {name}[{i}]: analytic {p.grad.reshape(-1)[i]: .8f}  numeric {num: .8f}")
