"""Why herding: the running mean of herded exemplars tracks the class mean.

Greedy mean-matching picks exemplars so that every prefix of the selection
approximates the class's feature mean as closely as possible, which is what
the balanced finetune stage and replay want from a small budget.
"""

import numpy as np

from tinycil import SplitMix64, herding_select

rng = np.random.default_rng(3)
features = rng.normal(size=(200, 16)) + rng.normal(size=(1, 16))
features /= np.linalg.norm(features, axis=1, keepdims=True)
mu = features.mean(axis=0)

herded = herding_select(features, budget=32)
stream = SplitMix64(9)
shuffled = stream.permutation(200)[:32].tolist()

print("prefix size | ||mean(herded) - mu|| | ||mean(random) - mu||")
for k in (1, 2, 4, 8, 16, 32):
    h = np.linalg.norm(features[herded[:k]].mean(axis=0) - mu)
    r = np.linalg.norm(features[shuffled[:k]].mean(axis=0) - mu)
    print(f"{k:11d} | {h:21.5f} | {r:20.5f}")

print("\nprefix property: selection(k) is a prefix of selection(k'):",
      herded[:8] == herding_select(features, budget=8))
