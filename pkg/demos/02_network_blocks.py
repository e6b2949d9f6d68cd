"""A tour of the layers that make up the classifier.

Shows the 3D convolution geometry, batch normalization's two modes, the
resampling ops, the separable residual unit with its parameter budget, and
finally the assembled network with its parameter ledger.
"""

import numpy as np

from fcspn import model as M
from fcspn import ops
from fcspn import tensor as T

rng = np.random.default_rng(3)

print("== conv3d geometry ==")
x = T.Tensor(rng.normal(size=(2, 9, 8, 8)))
for kernel, stride in (((3, 3, 3), (1, 1, 1)),
                       ((3, 3, 3), (2, 1, 1)),
                       ((5, 1, 1), (5, 1, 1))):
    spec = ops.Conv3dSpec(kernel=kernel, stride=stride)
    w = T.Tensor(rng.normal(size=(4, 2) + kernel) * 0.1)
    with T.no_grad():
        out = ops.conv3d(x, w, None, spec)
    print(f"kernel {kernel} stride {stride}: {x.shape} -> {out.shape}")

print()
print("== batch normalization: training vs inference ==")
feat = T.Tensor(rng.normal(2.0, 3.0, size=(3, 4, 5, 5)))
gamma = T.Tensor(np.ones(3))
beta = T.Tensor(np.zeros(3))
state = ops.BatchNormState(3)
with T.no_grad():
    normed = ops.batchnorm(feat, gamma, beta, state, training=True)
print("training output mean/std:",
      f"{normed.data.mean():+.3f} / {normed.data.std():.3f}")
print("running mean after one step:", np.round(state.running_mean, 3))
with T.no_grad():
    evaled = ops.batchnorm(feat, gamma, beta, state, training=False)
print("eval mode reuses running stats; output mean:",
      f"{evaled.data.mean():+.3f}")

print()
print("== trilinear upsampling is corner-aligned ==")
ramp = T.Tensor(np.arange(4.0).reshape(1, 1, 1, 4))
with T.no_grad():
    up = ops.trilinear_upsample(ramp, (1, 1, 7))
print("1D ramp 0..3 resampled to 7 points:", up.data.ravel())

print()
print("== adaptive average pooling covers the grid with near-equal cells ==")
plane = T.Tensor(np.arange(10.0).reshape(1, 1, 1, 10))
with T.no_grad():
    pooled = ops.adaptive_avg_pool(plane, (1, 1, 3))
print("10 values into 3 cells:", pooled.data.ravel(),
      "(cells cover indices 0-3, 3-6, 6-9)")

print()
print("== the separable residual unit ==")
params, states = M.ModelParams(), []
unit = M._DsrUnit(params, "unit", 3, rng, states)
cells = 0
for path in params.paths():
    tensor = params.get(path)
    if path.endswith(".weights"):
        cells += int(np.prod(tensor.shape[2:]))
        print(f"{path:28s} kernel {tensor.shape[2:]}")
print(f"kernel cells per channel pair: {cells} (a dense 3x3x3 needs 27)")
feat = T.Tensor(rng.normal(size=(3, 6, 7, 7)))
with T.no_grad():
    out = unit(feat, training=True)
print("residual unit preserves shape:", feat.shape, "->", out.shape)

print()
print("== the assembled network ==")
cfg = M.ModelConfig(in_bands=20, num_classes=3, base_channels=8, cspn_steps=4)
net = M.build(cfg, np.random.default_rng(0))
total = net.params.total_count()
print(f"parameters: {total} scalars across {len(net.params.paths())} tensors")
print("first few ledger entries:")
for path in net.params.paths()[:5]:
    print(f"  {path:30s} {net.params.get(path).shape}")
scene = T.Tensor(rng.normal(size=(20, 16, 16)))
with T.no_grad():
    logits = net.forward(scene, training=False)
    refined, _ = net.forward_refined(scene, training=False)
print("scene (20,16,16) -> class scores", logits.shape,
      "-> refined", refined.shape)
