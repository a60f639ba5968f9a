"""
Quantized Average Precision
===========================

Scores are spread over a histogram of bins with a triangular kernel, which
turns AP into a smooth function of the similarities. This script compares it
with exact AP and takes one gradient step by hand.
"""
import numpy as np

from rankdistill.ap_loss import APLossConfig, ap_loss_forward, quantized_ap, similarity_gradient, soft_bins

cfg = APLossConfig(num_bins=20)
print("bin centers:", np.round(cfg.centers[:5], 3), "...", np.round(cfg.centers[-2:], 3))

# every score lands in at most two neighbouring bins
s = np.array([0.93, 0.2, -0.41])
p = soft_bins(s, cfg)
print("non-zero bins per score:", (p > 0).sum(axis=1), " row sums:", p.sum(axis=1))

# a ranked list: 1 marks a positive
scores = np.array([0.9, 0.7, 0.65, 0.3, 0.1, -0.2, -0.6])
labels = np.array([1, 0, 1, 0, 1, 0, 0])
order = np.argsort(-scores)
hits = np.cumsum(labels[order])
exact = np.mean((hits / np.arange(1, 8))[labels[order] == 1])
for C in (5, 20, 80):
    print(f"C={C:3d}  quantized AP {quantized_ap(scores, labels, APLossConfig(C)):.4f}   exact {exact:.4f}")

# loss on a whole batch, then move the similarities against the gradient
rng = np.random.default_rng(0)
X = rng.normal(size=(8, 12))
X /= np.linalg.norm(X, axis=0)
S = X.T @ X
Y = (rng.random((12, 12)) < 0.3).astype(np.uint8)
Y = Y | Y.T
np.fill_diagonal(Y, 0)

res = ap_loss_forward(S, Y, cfg)
G = similarity_gradient(res)
step = np.clip(S - 0.5 * G / np.abs(G).max(), -1, 1)
print(f"loss {res.loss:.4f} -> {ap_loss_forward(step, Y, cfg).loss:.4f} after one step on S")
