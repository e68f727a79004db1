# Independent float64 reference for one local step of block 0 in a 2-block
# net (linear 3->4, relu | linear 4->2) with its head, written against torch.
# Prints values that tests/test_trainer.cpp freezes.
import torch

torch.set_default_dtype(torch.float64)


def fill(k, shape):
    n = 1
    for d in shape:
        n *= d
    vals = [0.05 * (((i * 37 + k * 11) % 17) - 8) for i in range(n)]
    return torch.tensor(vals).reshape(shape)


W0, b0 = fill(0, (4, 3)), fill(1, (4,)) + 0.3
W1, b1 = fill(2, (2, 4)), fill(3, (2,))
Wm, bm = fill(4, (2, 4)), fill(5, (2,)) + 0.3  # mirror, deliberately not equal to block 1
Wp, bp = fill(6, (2, 2)), fill(7, (2,))
lb = fill(8, (2,))
s = torch.tensor(1.2)
x = fill(9, (3, 3)) + 0.5
y = torch.tensor([0, 1, 1])

lr_l, lr_a, mu, wd, alpha = 0.1, 0.05, 0.9, 1e-4, 0.9

params = [W0, b0, Wm, bm, lb, Wp, bp]
for p in params:
    p.requires_grad_(True)

h = torch.relu(x @ W0.T + b0)
z = h @ Wm.T + bm + lb
logits = torch.relu(z) @ Wp.T + bp
loss = torch.nn.functional.cross_entropy(logits, y)
loss.backward()


def nesterov_first(p, lr):
    g = p.grad
    v = g
    return p.detach() - lr * (g + mu * v) - lr * wd * p.detach()


with torch.no_grad():
    W0n, b0n = nesterov_first(W0, lr_l), nesterov_first(b0, lr_l)
    lr_c = (2 - s.item()) * lr_a
    Wmn, bmn, lbn = nesterov_first(Wm, lr_c), nesterov_first(bm, lr_c), nesterov_first(lb, lr_c)
    Wpn = nesterov_first(Wp, lr_a)
    # s is not in the forward pass: zero gradient, no weight decay.
    sn = s.clamp(1e-3, 2 - 1e-3)
    Wme = sn * (alpha * Wmn + (1 - alpha) * W1)
    bme = sn * (alpha * bmn + (1 - alpha) * b1)

print("loss", repr(loss.item()))
print("W0_grad", [repr(v) for v in W0.grad.flatten().tolist()])
print("z", z.tolist())
print("s_new", repr(sn.item()))
print("W0_new[0,0]", repr(W0n[0, 0].item()), "W0_new[3,2]", repr(W0n[3, 2].item()))
print("lb_new", [repr(v) for v in lbn.tolist()])
print("Wp_new[1,0]", repr(Wpn[1, 0].item()))
print("mirror_w", [repr(v) for v in Wme.flatten().tolist()])
print("mirror_b", [repr(v) for v in bme.tolist()])
