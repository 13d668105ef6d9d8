"""Synthetic datasets, deterministic class shuffling, and protocol plans.

Classes are smooth low-frequency patterns plus difficulty-scaled noise; the
class order for an incremental run comes from a Fisher-Yates shuffle driven
by a fixed SplitMix64 seed, so every implementation of the protocol sees the
same step layout.
"""

from tinycil import (ProtocolConfig, Total, PerClass, build_protocol,
                     generate_synthetic, shuffle_classes)

ds = generate_synthetic(num_classes=10, per_class_train=64, per_class_test=20,
                        image_size=16, difficulty=0.5, seed=7)
print(f"dataset: {ds.images.shape[0]} images "
      f"({len(ds.train_indices)} train / {len(ds.test_indices)} test), "
      f"{ds.num_classes} classes, u8 {ds.images.shape[1:]} each")

# per-class pixel spread shows the difficulty knob
for difficulty in (0.0, 0.5, 2.0):
    probe = generate_synthetic(3, 16, 4, image_size=16, difficulty=difficulty,
                               seed=7)
    cls0 = probe.images[probe.class_indices("train", 0)].astype(float)
    spread = cls0.std(axis=0).mean()
    print(f"difficulty {difficulty}: mean within-class pixel std = {spread:.2f}")

print("\nclass order, seed 1993:", shuffle_classes(10, 1993).tolist())

print("\nthe three standard protocol shapes at 100 classes:")
for name, cfg in [
    ("half start, fixed 20/class", ProtocolConfig(100, 50, 10, PerClass(20))),
    ("cold start, fixed 20/class", ProtocolConfig(100, 10, 10, PerClass(20))),
    ("cold start, shared pool   ", ProtocolConfig(100, 10, 10, Total(2000))),
]:
    plan = build_protocol(cfg)
    print(f"  {name}: {len(plan.steps)} steps, sizes {plan.sizes}")

plan = build_protocol(ProtocolConfig(100, 5, 5, Total(2000)))
print(f"\n+5 increments from 5 classes: {len(plan.steps)} steps; the shared "
      f"pool shrinks per class as classes accumulate:")
for n_seen in (5, 20, 50, 100):
    print(f"  {n_seen:3d} classes seen -> {2000 // n_seen} exemplars per class")
