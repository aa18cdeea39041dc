"""Saliency metrics on synthetic scenes: MAE, the P-R curve, max F and S-measure."""
import numpy as np

from cirnet import metrics
from cirnet.data import SceneSpec, generate

scenes = generate(SceneSpec(size=64, seed=3), 10)
gts = [s.gt for s in scenes]

# a perfect prediction
rep = metrics.evaluate(gts, gts)
print("identity:", {k: round(v, 6) for k, v in rep.mean.items()}, "max F", rep.max_f)

# increasingly noisy predictions
rng = np.random.default_rng(1)
for noise in (0.1, 0.3, 0.6):
    preds = [np.clip(g + rng.normal(scale=noise, size=g.shape), 0, 1) for g in gts]
    rep = metrics.evaluate(preds, gts)
    print(f"noise {noise}: MAE {rep.mean['mae']:.4f}  max F {rep.max_f:.4f}  S {rep.mean['s_measure']:.4f}")

# the P-R curve for one image, a few thresholds
curve = metrics.pr_curve(preds[0], gts[0])
for t in (0, 64, 128, 192, 255):
    print(f"threshold {t:3d}: precision {curve[t, 1]:.3f} recall {curve[t, 2]:.3f}")
