"""A tour of the differentiation engine.

Builds small tensor computations, runs reverse-mode backward passes, and
checks every gradient against central finite differences.
"""

import numpy as np

from virtlprm import autodiff as ad
from virtlprm.autodiff import Tensor, grad_check

# A scalar chain: loss = sum((x @ w)^2). The engine records every applied
# operation; backward() walks the record once in reverse.
rng = np.random.default_rng(0)
x = Tensor(rng.standard_normal((4, 3)).astype(np.float64), requires_grad=True)
w = Tensor(rng.standard_normal((3, 2)).astype(np.float64), requires_grad=True)

y = ad.matmul(x, w)
loss = ad.tsum(ad.mul(y, y))
loss.backward()
print("loss:", loss.item())
print("dL/dw:\n", w.grad)

# The same gradient, verified independently with central differences.
w.grad = None
err = grad_check(lambda t: ad.tsum(ad.mul(m := ad.matmul(x, t), m)), w, step=1e-6)
print(f"matmul chain max relative gradient error: {err:.2e}")

# Gradients accumulate across backward calls until zeroed, which is what
# lets one parameter feed several loss terms.
a = Tensor(np.array([2.0]), requires_grad=True)
ad.tsum(ad.mul(a, a)).backward()
ad.tsum(ad.mul(a, a)).backward()
print("accumulated gradient after two backwards of a^2 at a=2:", a.grad)

# A deliberately wrong backward rule is caught immediately: the checker
# reports a relative error of 0.5 where correct rules sit near 1e-10.
bad = Tensor(np.array([1.0, -2.0]), requires_grad=True)


def wrong_rule(t):
    data = np.asarray((t.data * t.data).sum())
    return Tensor._result(data, (t,), lambda g: (4.0 * t.data * g,))


print(f"wrong-rule gradient error: {grad_check(wrong_rule, bad, step=1e-6):.3f}")

# Batch normalization, GELU, softmax, and the mean-squared-error loss are
# the remaining building blocks of the detector networks.
batch = Tensor(rng.standard_normal((8, 4)).astype(np.float32))
gamma = Tensor(np.ones(4, dtype=np.float32), requires_grad=True)
beta = Tensor(np.zeros(4, dtype=np.float32), requires_grad=True)
stats = ad.RunningStats(4)
normed = ad.batch_norm(batch, gamma, beta, stats, mode="train")
print("batch-norm column means (should be ~0):", np.round(normed.data.mean(axis=0), 7))

probs = ad.softmax(Tensor(np.array([[1.0, 2.0, 3.0]])), axis=1)
print("softmax row:", np.round(probs.data, 4), "sum:", probs.data.sum())
print("gelu(1) =", ad.gelu(Tensor(np.array([1.0]))).data[0])
