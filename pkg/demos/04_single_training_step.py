"""One supervised training run: stems side by side on the same budget.

The convolutional stem reaches high accuracy within a few epochs while the
patchify model is still warming up; double the patchify budget and it
catches up. This is the toy-scale version of the convergence gap that
motivates the conv stem.
"""

from tinycil import (ModelSpec, PerClass, ProtocolConfig, TrainSettings,
                     generate_synthetic, run_protocol)

dataset = generate_synthetic(10, 64, 20, image_size=16, difficulty=0.5, seed=7)
settings = TrainSettings(batch_size=64, backbone_lr=8e-3, warmup_epochs=2)


def single_run(stem, epochs):
    spec = ModelSpec(image_size=16, stem_kind=stem, patch_size=4, stem_depth=2,
                     stem_channels=(16, 32), embed_dim=32, num_blocks=2,
                     num_heads=2, num_classes=10)
    protocol = ProtocolConfig(total_classes=10, initial_classes=10, increment=1,
                              budget=PerClass(10), epochs_initial=epochs,
                              epochs_step=1)
    report = run_protocol(protocol, dataset, settings, spec, seed=1)[0]
    return report


for stem, epochs in (("conv", 12), ("patchify", 12), ("patchify", 24)):
    r = single_run(stem, epochs)
    losses = [round(v, 2) for v in r.loss_trace[:: max(1, epochs // 6)]]
    print(f"{stem:8s} @ {epochs:2d} epochs: test top1 = {r.top1:.3f}  "
          f"loss trace {losses}")
print("\nsame seeds, same data; only the stem and the budget changed.")
