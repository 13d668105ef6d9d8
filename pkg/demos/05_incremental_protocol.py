"""A full incremental run: watch forgetting appear and finetuning fight it.

Two arms on the same 2-step protocol (5 classes, then 5 more with a shared
replay pool): with and without the class-balanced finetune stage. The bias
rate is the fraction of old-class test samples that land in new-class
columns of the confusion matrix.
"""

from tinycil import (ModelSpec, ProtocolConfig, Total, TrainSettings,
                     average_incremental_accuracy, generate_synthetic,
                     run_protocol)

dataset = generate_synthetic(10, 64, 20, image_size=16, difficulty=0.5, seed=7)
spec = ModelSpec(image_size=16, stem_kind="conv", patch_size=4, stem_depth=2,
                 stem_channels=(16, 32), embed_dim=32, num_blocks=2,
                 num_heads=2, num_classes=10)
protocol = ProtocolConfig(total_classes=10, initial_classes=5, increment=5,
                          budget=Total(50), epochs_initial=12, epochs_step=8)

for finetune in (True, False):
    settings = TrainSettings(batch_size=64, backbone_lr=8e-3, warmup_epochs=2,
                             epochs_finetune=10, balanced_finetune=finetune)
    reports = run_protocol(protocol, dataset, settings, spec, seed=1)
    label = "with balanced finetune   " if finetune else "without balanced finetune"
    print(f"--- {label} ---")
    for r in reports:
        print(f"  step {r.step}: {r.n_classes} classes, top1 {r.top1:.3f}, "
              f"old->new bias {r.bias_rate:.3f}, eta {r.eta:.2f}")
    avg = average_incremental_accuracy([r.top1 for r in reports])
    final = reports[-1]
    old_block = final.confusion[:5, :5].sum()
    leaked = final.confusion[:5, 5:].sum()
    print(f"  avg incremental accuracy {avg:.3f}; of 100 old-class test "
          f"samples, {leaked} predicted as new classes")
