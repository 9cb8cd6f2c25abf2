"""Inspect the detector graph: parameter budget and prediction scales.

Prints the backbone's per-module parameter table for the full-width build,
compares the rebuilt backbone against the heavier original, then assembles
the complete detector at toy width and shows the three output strides.
"""

import numpy as np

from istdyolo import tensor as T
from istdyolo.model import Backbone, ModelConfig, build_model, count_params
from istdyolo.train import convert_dtype


def main():
    rng = np.random.default_rng(0)
    backbone = Backbone("reconstructed", rng, width=1.0)
    print("reconstructed backbone, width 1.0")
    for i, (kind, count) in enumerate(backbone.row_param_counts(), start=1):
        print(f"  row {i}  {kind:<6} {count:>9}")
    total = backbone.param_count()
    original = Backbone("original", rng, width=1.0).param_count()
    print(f"  total {total} vs original {original} "
          f"({100 * total / original:.0f}% of the original budget)")

    # the assembled toy detector: three heads, strides 4/8/16, nothing coarser
    cfg = ModelConfig(width=0.125, input_size=128, n_classes=2)
    model = build_model(cfg, seed=0)
    convert_dtype(model, np.float32)
    model.eval()
    print(f"\ntoy detector width {cfg.width}: {count_params(model)} parameters")
    x = np.zeros((1, 3, 128, 128), dtype=np.float32)
    with T.no_grad():
        raws = model(x)
    for raw, stride in zip(raws, (4, 8, 16)):
        print(f"  stride {stride:>2} map {tuple(raw.data.shape)}")


if __name__ == "__main__":
    main()
