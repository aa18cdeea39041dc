"""Train a narrow network for under a minute and look at what it predicts.

The default configuration is what the acceptance experiments use; here the
channels are reduced so the script finishes quickly on one core.
"""
import time

import numpy as np

from cirnet import metrics, model
from cirnet.data import SceneSpec, generate

train_set = generate(SceneSpec(size=32, seed=101), 64)
test_set = generate(SceneSpec(size=32, seed=202), 16)

cfg = model.ModelConfig(channels=(8, 12, 16, 16, 16), stage_convs=1)
net = model.CirNet(cfg)
print("parameters:", net.num_parameters())

tc = model.TrainConfig(lr=1e-2, decay_every=4, epochs=20, batch_size=8, scales=(32,), augment=True)
t0 = time.time()
rows = model.train(net, train_set, tc, on_step=lambda st, r: print(st, round(r[1], 4)) if st % 20 == 0 else None)
print(f"{len(rows)} steps in {time.time() - t0:.0f}s, final loss {rows[-1][1]:.4f}")

gts = [s.gt for s in test_set]
preds = {name: [] for name in ("rgb", "depth", "rgbd")}
for s in test_set:
    for name, m in zip(preds, model.predict(net, s.rgb[None], s.depth[None])):
        preds[name].append(m[0, 0])
for name, maps in preds.items():
    rep = metrics.evaluate(maps, gts)
    print(f"{name:5s} stream: max F {rep.max_f:.3f}  MAE {rep.mean['mae']:.3f}")

# coarse ascii view of the first prediction next to its ground truth
pred = preds["rgbd"][0]
for row_p, row_g in zip(pred[::2, ::2], gts[0][::2, ::2]):
    print("".join("#" if v > 0.5 else "." for v in row_p), "  ", "".join("#" if v else "." for v in row_g))
