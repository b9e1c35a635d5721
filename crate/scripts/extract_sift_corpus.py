#!/usr/bin/env python3
"""Build a small SIFT corpus (fvecs/ivecs, TEXMEX layout) from the sample
images bundled with scikit-image, scikit-learn and matplotlib.

Query, learning and base vectors come from disjoint sets of images, so
near-duplicate descriptors of one keypoint never straddle splits. Ground
truth is left to `qadc gt`.

    python3 scripts/extract_sift_corpus.py OUT_DIR
    qadc gt --base OUT_DIR/sift_base.fvecs --queries OUT_DIR/sift_query.fvecs \
        --out OUT_DIR/sift_groundtruth.ivecs
"""
import glob
import os
import sys

import cv2
import numpy as np

QUERY_IMAGES = {"china.jpg", "flower.jpg", "rocket.jpg", "coins.png", "chelsea.png"}
LEARN_IMAGES = {"hubble_deep_field.jpg", "grass.png", "ihc.png"}
SCALES = (1.0, 0.75, 1.5)
N_QUERY = 1000


def image_paths():
    import matplotlib
    import skimage
    import sklearn

    roots = [
        os.path.join(os.path.dirname(skimage.__file__), "data"),
        os.path.join(os.path.dirname(sklearn.__file__), "datasets", "images"),
        os.path.join(os.path.dirname(matplotlib.__file__), "mpl-data", "sample_data"),
    ]
    out = []
    for root in roots:
        for ext in ("png", "jpg", "jpeg", "tif", "tiff", "bmp", "gif"):
            out += glob.glob(os.path.join(root, "**", "*." + ext), recursive=True)
    return sorted(set(out))


def descriptors(path, sift):
    img = cv2.imread(path, cv2.IMREAD_GRAYSCALE)
    if img is None:
        return np.zeros((0, 128), np.float32)
    parts = []
    for s in SCALES:
        im = img if s == 1.0 else cv2.resize(img, None, fx=s, fy=s)
        _, d = sift.detectAndCompute(im, None)
        if d is not None:
            parts.append(d)
    return np.concatenate(parts) if parts else np.zeros((0, 128), np.float32)


def write_fvecs(path, x):
    x = np.ascontiguousarray(x, dtype=np.float32)
    n, d = x.shape
    out = np.empty((n, d + 1), dtype=np.float32)
    out[:, 0] = np.array([d], dtype=np.int32).view(np.float32)[0]
    out[:, 1:] = x
    out.tofile(path)


def main():
    out_dir = sys.argv[1]
    os.makedirs(out_dir, exist_ok=True)
    sift = cv2.SIFT_create(nfeatures=0, contrastThreshold=0.01)
    split = {"query": [], "learn": [], "base": []}
    for p in image_paths():
        name = os.path.basename(p)
        d = descriptors(p, sift)
        if len(d) == 0:
            continue
        key = "query" if name in QUERY_IMAGES else "learn" if name in LEARN_IMAGES else "base"
        split[key].append(d)
    rng = np.random.default_rng(0)
    for key, parts in split.items():
        x = np.unique(np.concatenate(parts), axis=0)
        x = x[rng.permutation(len(x))]
        if key == "query":
            x = x[:N_QUERY]
        write_fvecs(os.path.join(out_dir, f"sift_{key}.fvecs"), x)
        print(key, x.shape)


if __name__ == "__main__":
    main()
