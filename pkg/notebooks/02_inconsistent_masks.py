# %% [markdown]
# Training segmentation features on masks whose IDs disagree between views,
# then segmenting objects from a single pixel prompt in held-out views.

# %%
import numpy as np

from cgsplat import SceneSpec, TrainConfig, make_dataset, train
from cgsplat.metrics import Query, evaluate
from cgsplat.segmenter import convex_hull_extract, query_feature, select_gaussians_3d

ds = make_dataset(SceneSpec(), split_prob=0.3)
len(ds.scene.cloud), len(ds.train), len(ds.test)

# %%
# the same object gets a different ID in every training view
for v in ds.train[:4]:
    ids = np.unique(v.mask.labels)
    print(v.index, ids[ids > 0])

# %%
def fit(use_regularization, lam=1e-4, iterations=1500):
    cfg = TrainConfig(iterations=iterations, freeze_geometry=True, lambda_clustering=lam, clustering_every=1,
                      regularization_every=1, use_regularization=use_regularization)
    cfg.learning_rates["features"] = 0.03
    return train(ds.scene.cloud, ds.train, cfg, record_time=False)


with_reg, without_reg = fit(True), fit(False)
[round(r["total"], 3) for r in with_reg.log[::250]]

# %%
ref = ds.test[0]
queries = [Query(k, (ref.gt_mask, k), ref.camera) for k in (1, 2, 3)]
cams, gts = [v.camera for v in ds.test], [v.gt_mask for v in ds.test]
for name, res in (("with regularization", with_reg), ("without", without_reg)):
    rep = evaluate(res.cloud, cams, gts, queries)
    print(name)
    print(rep.to_table())

# %% [markdown]
# Selecting in 3D: Gaussians whose feature matches the prompted pixel, closed
# under the convex hull of the matches.

# %%
ids = ds.scene.instance_id
for k in (1, 2, 3):
    q = query_feature(with_reg.cloud, ref.camera, (ref.gt_mask, k))
    seeds = select_gaussians_3d(with_reg.cloud, q)
    hull = convex_hull_extract(with_reg.cloud, seeds)
    print(k, len(seeds), len(hull.hull_indices), "recall", np.isin(np.flatnonzero(ids == k), hull.hull_indices).mean())
