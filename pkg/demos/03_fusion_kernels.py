"""Temporal BEV fusion on random features: align past frames to the present, then attend across time.

Run: python demos/03_fusion_kernels.py
"""
import numpy as np

from occflow.geometry import RigidTransform
from occflow.grid import FeatureVolume, GridSpec
from occflow.kernels import DeformAttnParams, bfam, ego_align, selftest, volume_to_bev

rng = np.random.default_rng(0)
spec = GridSpec((-4.0, -4.0, -1.0), 0.5, (16, 16, 4))
frames = [FeatureVolume(spec, rng.normal(size=spec.dims + (8,))) for _ in range(3)]

# the ego car drove 0.5 m forward per frame; express older frames in the current ego frame
aligned = [ego_align(v, RigidTransform.from_rt(np.eye(3), (0.5 * (2 - i), 0.0, 0.0))) for i, v in enumerate(frames)]
bevs = [volume_to_bev(v) for v in aligned]

params = DeformAttnParams.random(8, n_heads=2, n_points=4, n_maps=2, beta=0.5, seed=1)
fused = bfam(bevs, params)
for i, (before, after) in enumerate(zip(bevs, fused)):
    change = np.abs(after - before.stacked()).mean()
    print(f"frame {i}: mean absolute change after fusion {change:.3f}")

for name, ok, detail in selftest():
    print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
