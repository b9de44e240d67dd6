"""Sparse convolution, shifted windows and the XNOR/popcount kernel on a toy scene.

Run: python demos/01_shifted_conv.py
"""
import numpy as np

from bscnet.binarize import binarize_activations, binarize_weights, sign, xnor_sparse_conv
from bscnet.conv import shifted_sparse_conv, sparse_conv
from bscnet.sparse import KernelOffsets, build_kernel_map, voxelize
from bscnet.synthetic import SceneConfig, generate_scene

rng = np.random.default_rng(0)
scene = generate_scene(SceneConfig(num_points=3000, seed=7))
vox = voxelize(scene.points, 0.05, labels=scene.labels)
x = vox.tensor
print(f"{len(scene.points)} points -> {x.num_sites} active 5 cm sites")

w = rng.normal(size=(27, x.channels, 4))
plain = sparse_conv(x, w, KernelOffsets.cube(3)).features

# A shifted window sees a different neighbourhood; only the centre offset is shared.
for shift in [(0, 0, 0), (1, 1, 1), (-1, 1, -1)]:
    out = shifted_sparse_conv(x, w, 3, shift).features
    print(f"shift {shift}: mean |out - unshifted| = {np.mean(np.abs(out - plain)):.4f}")

# Binary path: sign(x) * sign(W) via packed words, then the weight scale.
kmap = build_kernel_map(x, x.coords, KernelOffsets.cube(3), 1)
bw = binarize_weights(w)
fast = xnor_sparse_conv(x.features, bw, kmap)
slow = sparse_conv(x.replace_features(sign(x.features)), sign(w) * np.mean(np.abs(w)), KernelOffsets.cube(3)).features
print("xnor conv equals float conv of signs:", np.allclose(fast, slow))
print("activation bits per site:", binarize_activations(x.features).shape)
