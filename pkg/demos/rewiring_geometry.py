"""
Rewiring an edit direction in two dimensions
============================================

A target gradient that points against the training gradient is projected
back onto the half-space where a descent step does not raise the training
loss (to first order).
"""

import numpy as np

from gnnedit.rewire import gre_plus_rewire, gre_rewire

# the target gradient wants to move along (1, -2); the training gradient is (1, 1)
g_tg = np.array([1.0, -2.0])
g_train = np.array([1.0, 1.0])
print("inner product before:", g_train @ g_tg)

g = gre_rewire(g_tg, g_train)
print("rewired direction:", g, " inner product after:", g_train @ g)

# lambda only shrinks the step
for lam in (0.0, 1.0, 10.0):
    print(f"lambda={lam:>4}:", gre_rewire(g_tg, g_train, lam))

# with several anchors the direction must agree with each of them
G = np.array([[1.0, 1.0, 0.0],
              [0.0, 1.0, 1.0],
              [1.0, 0.0, -1.0]])
g_tg3 = np.array([-1.0, 0.5, 2.0])
g3 = gre_plus_rewire(g_tg3, G)
print("anchor inner products before:", G @ g_tg3)
print("anchor inner products after: ", np.round(G @ g3, 12))
