"""Boundary-aware segmentation at toy scale, start to finish.

Run:  python3 demos/boundary_aware_training.py ITN.ifck     (a few minutes)

Pass the checkpoint written by `inverseform train-itn`. The script trains two
small segmentation models on 48x48 shapes, one with the InverseForm term
(gamma = 0.5) and one without, then compares validation metrics and shows that
both models cost the same at inference time.
"""

import sys

import numpy as np

from inverseform.itn import freeze, load_checkpoint
from inverseform.loss import LossWeights
from inverseform.segtoy import SegTrainConfig, gen_shapes, inference_cost, init_seg_model, train_seg

if len(sys.argv) != 2:
    sys.exit(__doc__)
itn = freeze(load_checkpoint(sys.argv[1]))

train = gen_shapes(400, 48, 48, seed=0)
val = gen_shapes(60, 48, 48, seed=1)
s = train[0]
print(f"sample: image {s.image.shape}, classes {np.unique(s.labels).tolist()}, "
      f"boundary pixels {int(s.gt_boundary.values.sum())}")

cfg = SegTrainConfig(epochs=3, tile_size=itn.tile_size)
results = {}
for gamma in (0.0, 0.5):
    model, hist = train_seg(init_seg_model(5, 48, 48, seed=0), train, val, itn, LossWeights(1.0, gamma), cfg=cfg)
    results[gamma] = (model, hist[-1])
    for r in hist:
        print(f"gamma {gamma}: epoch {r['epoch']} loss {r['train_loss']:.3f} (if {r['if']:.3f})  "
              f"val mIoU {r['val_miou']:.4f}  mBA {r['val_mba']:.4f}")

(m0, r0), (m5, r5) = results[0.0], results[0.5]
print(f"\nd mIoU {r5['val_miou'] - r0['val_miou']:+.4f}   d mBA {r5['val_mba'] - r0['val_mba']:+.4f}")
print("inference cost (params, MACs):", inference_cost(m0), "vs", inference_cost(m5))
print("One seed at this size is noisy; the acceptance test averages five seeds at 96x96.")
