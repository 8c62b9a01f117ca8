#!/usr/bin/env python3
"""How much of a feature cache is explained by the lesion attributes?

    python scripts/probe_teacher_features.py <dataset> <cache_dir> [<cache_dir> ...]

Fits ridge regressions from standardized cache vectors to lesion diameter,
contrast and score (5-fold cross-validated R^2) and reports the share of
cache variance explained linearly by (diameter, contrast, score).
"""
import sys

import numpy as np

from guideline_distill.data_synth import load_dataset
from guideline_distill.distill import FeatureCache


def cv_r2(x, y, lam=1.0, folds=5):
    idx = np.arange(len(y))
    pred = np.zeros_like(y)
    for k in range(folds):
        test = idx % folds == k
        xt, yt = x[~test], y[~test]
        mu, ym = xt.mean(0), yt.mean()
        a = xt - mu
        w = np.linalg.solve(a.T @ a + lam * np.eye(a.shape[1]), a.T @ (yt - ym))
        pred[test] = (x[test] - mu) @ w + ym
    return 1 - np.sum((y - pred) ** 2) / np.sum((y - y.mean()) ** 2)


def main(dataset, *caches):
    samples = load_dataset(dataset, "train")
    attrs = np.array([[s.attrs.diameter_voxels, s.attrs.contrast, s.clean_score] for s in samples], dtype=float)
    for path in caches:
        cache = FeatureCache.load(path)
        v = cache.lookup([s.id for s in samples]).double().numpy()
        v = (v - v.mean(0)) / (v.std(0) + 1e-6)
        r2 = [cv_r2(v, attrs[:, j]) for j in range(3)]
        design = np.c_[attrs, np.ones(len(attrs))]
        resid = v - design @ np.linalg.lstsq(design, v, rcond=None)[0]
        explained = 1 - resid.var() / v.var()
        print(f"{path}: R2 diameter {r2[0]:.3f} contrast {r2[1]:.3f} score {r2[2]:.3f}; variance explained {explained:.2f}")


if __name__ == "__main__":
    if len(sys.argv) < 3:
        sys.exit(__doc__)
    main(*sys.argv[1:])
