"""Tour of the tensor core: tapes, gradients, and a finite-difference check.

The whole package runs on this little engine: float64 numpy arrays wrapped in
Tensors, ops recorded on an explicit Tape, gradients produced by one reverse
sweep. No tape active means no recording, which is how eval-mode forward
passes stay cheap.
"""

import numpy as np

from tinycil import Tape, Tensor, backward
from tinycil import tensor as T

# A scalar chain: loss = sum((x @ w - y)^2)
rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(4, 3)))
w = Tensor(rng.normal(size=(3, 1)), requires_grad=True)
y = Tensor(rng.normal(size=(4, 1)))

with Tape() as tape:
    err = T.matmul(x, w) - y
    loss = T.sum_(err * err)
print(f"loss = {loss.item():.6f}, nodes recorded = {len(tape)}")

backward(tape, loss)
print("analytic dloss/dw:", np.round(w.grad.ravel(), 6))

# The same gradient by central finite differences
h = 1e-5
fd = np.zeros_like(w.data)
for i in range(w.size):
    for sign in (+1, -1):
        w.data.ravel()[i] += sign * h
        e = x.data @ w.data - y.data
        fd.ravel()[i] += sign * (e * e).sum() / (2 * h)
        w.data.ravel()[i] -= sign * h
print("finite-diff dloss/dw:", np.round(fd.ravel(), 6))
print("max abs difference :", float(np.abs(fd - w.grad).max()))

# A consumed tape refuses a second backward pass
try:
    backward(tape, loss)
except Exception as exc:
    print(f"second backward correctly rejected: {exc}")

# Without an active tape, nothing is recorded (eval mode)
z = T.relu(Tensor(np.array([-1.0, 2.0]), requires_grad=True))
print("op outside a tape has tape_id:", z.tape_id)
