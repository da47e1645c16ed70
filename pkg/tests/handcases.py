"""Hand-worked evaluation case: three specimens, two levels, Top-1/Top-2.

Level-1 prompts: e1 (id 0), e2 (id 1).
Level-2 prompts: e1 (id 0), (e1+e2)/sqrt2 (id 1), e2 (id 2).
Labels: s0 = (0, 0), s1 = (0, 1), s2 = (1, missing).

I->T queries: s0 = e1, s1 = e2, s2 = (e1+e2)/sqrt2
  level 1: s0 rank 0; s1 rank 1; s2 ties at 0.707, lower ID 0 wins so rank 1
  level 2: s0 rank 0; s1 rank 1 (e2 beats the diagonal); s2 unlabeled
D->T queries: s0 has an all-N sequence (a miss), s1 failed to encode
  (excluded), s2 = e2
  level 1: s0 miss, s2 rank 0; level 2: s0 miss
"""

import math

import numpy as np

E1, E2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
DIAG = np.array([1.0, 1.0]) / math.sqrt(2)

PROMPTS = [np.stack([E1, E2]), np.stack([E1, DIAG, E2])]
LABELS = np.array([[0, 0], [0, 1], [1, -1]])
QUERIES = {
    ("I->T", "clean"): [E1, E2, DIAG],
    ("D->T", "clean"): ["empty", None, E2],
}
KS = (1, 2)

EXPECTED_CELLS = {
    ("I->T", "clean", 1, 1): 100 * 1 / 3, ("I->T", "clean", 1, 2): 100.0,
    ("I->T", "clean", 2, 1): 50.0, ("I->T", "clean", 2, 2): 100.0,
    ("D->T", "clean", 1, 1): 50.0, ("D->T", "clean", 1, 2): 50.0,
    ("D->T", "clean", 2, 1): 0.0, ("D->T", "clean", 2, 2): 0.0,
}
EXPECTED_GLOBAL = {
    ("I->T", "clean", 1): 100 * 2 / 5, ("I->T", "clean", 2): 100.0,
    ("D->T", "clean", 1): 100 * 1 / 3, ("D->T", "clean", 2): 100 * 1 / 3,
}
EXPECTED_COUNTS = {
    ("I->T", "clean", 1): 3, ("I->T", "clean", 2): 2,
    ("D->T", "clean", 1): 2, ("D->T", "clean", 2): 1,
}
EXPECTED_EXCLUDED = {("I->T", "clean"): 0, ("D->T", "clean"): 1}
