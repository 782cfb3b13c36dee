"""
Writing the reduced image set as IDX files
==========================================

The image experiment reads IDX files.  This writes the 4000-image digit set
(3400 train, 600 validation, 8x8 grey) that the bundled config expects.

    python3 demos/05_make_digits_idx.py data/
"""
import argparse

import numpy as np

from flexdistill.data import load_idx, write_digit_idx

p = argparse.ArgumentParser(description=__doc__.splitlines()[1])
p.add_argument("directory", nargs="?", default="data")
p.add_argument("--seed", type=int, default=0)
args = p.parse_args()

paths = write_digit_idx(args.directory, seed=args.seed)
for p_ in paths:
    print("wrote", p_)
train_set = load_idx(paths[0], paths[1])
print("train images", train_set.inputs.shape, "class counts", np.bincount(train_set.labels))
