#!/usr/bin/env python3
"""Regenerate the bundled CSV datasets from scikit-learn's built-in copies.

Writes feature/label CSVs plus a manifest per dataset into data/.
Run from the repository root:  python3 scripts/fetch_datasets.py
"""

import json
import os

from sklearn.datasets import load_breast_cancer, load_digits, load_wine

OUT = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "data")

# train/val sizes follow the standard ten-label-per-class-style protocol
# used by the experiment configs
SPLITS = {"wine": (10, 20), "cancer": (10, 20), "digits": (50, 100)}


def dump(name, bunch):
    feat_path = os.path.join(OUT, f"{name}_features.csv")
    label_path = os.path.join(OUT, f"{name}_labels.csv")
    names = [str(n).replace(",", " ") for n in getattr(bunch, "feature_names", [])]
    if len(names) != bunch.data.shape[1]:
        names = [f"f{j}" for j in range(bunch.data.shape[1])]
    with open(feat_path, "w") as f:
        f.write(",".join(names) + "\n")
        for row in bunch.data:
            f.write(",".join(repr(float(v)) for v in row) + "\n")
    with open(label_path, "w") as f:
        f.write("label\n")
        for y in bunch.target:
            f.write(f"{int(y)}\n")
    n_train, n_val = SPLITS[name]
    manifest = {
        "name": name,
        "features": f"{name}_features.csv",
        "labels": f"{name}_labels.csv",
        "graph": None,
        "has_header": True,
        "n_train": n_train,
        "n_val": n_val,
        "standardize": True,
    }
    with open(os.path.join(OUT, f"{name}.manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    print(f"{name}: N={bunch.data.shape[0]} F={bunch.data.shape[1]} C={len(set(bunch.target))}")


def main():
    os.makedirs(OUT, exist_ok=True)
    dump("wine", load_wine())
    dump("cancer", load_breast_cancer())
    dump("digits", load_digits())


if __name__ == "__main__":
    main()
