"""Walk through the reverse-mode tensor engine.

Builds a few expressions, runs backward, and cross-checks every analytic
gradient against central finite differences.
"""

import numpy as np

from istdyolo import tensor as T


def main():
    rng = np.random.default_rng(0)

    # scalar chain rule: d/dx mean(sigmoid(x) * x) via the tape
    x = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    y = T.mean(T.sigmoid(x) * x)
    y.backward()
    print("loss", float(y.data))
    print("grad shape", x.grad.shape, "first row", np.round(x.grad[0], 5))

    # the same gradient from finite differences
    err = T.grad_check(lambda t: T.mean(T.sigmoid(t) * t), [x])
    print(f"finite-difference mismatch {err:.3e}")

    # a small two-layer network: 1x1 convolutions act as linear layers
    w1 = T.Tensor(rng.normal(scale=0.3, size=(8, 4, 1, 1)), requires_grad=True)
    w2 = T.Tensor(rng.normal(scale=0.3, size=(1, 8, 1, 1)), requires_grad=True)
    data = T.Tensor(rng.normal(size=(16, 4, 1, 1)))
    target = rng.normal(size=(16, 1, 1, 1))

    def loss_fn(a, b):
        hidden = T.silu(T.conv2d(data, a))
        pred = T.conv2d(hidden, b)
        diff = pred - target
        return T.mean(diff * diff)

    loss = loss_fn(w1, w2)
    loss.backward()
    print("mlp loss", float(loss.data))
    print("w1 grad norm", float(np.linalg.norm(w1.grad)))
    err = T.grad_check(loss_fn, [w1, w2])
    print(f"mlp gradient mismatch {err:.3e}")

    # no_grad suppresses the tape entirely
    with T.no_grad():
        silent = T.mean(T.sigmoid(x) * x)
    print("recorded a graph under no_grad:", silent.requires_grad)


if __name__ == "__main__":
    main()
