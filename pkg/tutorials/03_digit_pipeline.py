"""The full pipeline on 28x28 digit images, driven through the same code
paths the command line uses: config text -> network -> training -> checkpoint
-> posterior-predictive evaluation -> per-draw box data.

Runs at desk scale (a few minutes).  Point CORRBNN_DATA_DIR at the official
IDX files and change `dataset` to `mnist` to run on the real thing.
"""

import tempfile
from pathlib import Path

import numpy as np

from corrbnn import cli, config as C, net as N, predict
from corrbnn.rng import KeyedRNG

CONFIG = """
[train]
mode = bayes
batch_size = 64
iterations = 1500
base_lr = 0.01
schedule = inv
lr_gamma = 0.0001
lr_power = 0.75
momentum = 0.9
beta = 6000
kl_reduction = 100.0
kappa = 50.0
seed = 1
log_every = 250

[data]
dataset = digits
train_count = 6000
test_count = 1000

[layer dense]
out = 100
prior_std = 1.0

[layer relu]

[layer dense]
out = 10
prior_std = 1.0
"""

cfg = C.parse_config(CONFIG)
train_set, test_set = cli.load_datasets(cfg)
print(f"{len(train_set)} training images, {len(test_set)} test images")

network = C.build_network(cfg)
result = N.train(network, train_set, C.train_config(cfg), test_set=test_set)
for step, lr, loss, err in result.log:
    print(f"iter {step:4d}  loss {loss:7.4f}  test_err {err:.4f}")

# checkpoints are a plain named-tensor container with the config embedded,
# so a file alone is enough to rebuild and keep training
work = Path(tempfile.mkdtemp())
ckpt = work / "digits.ckpt"
N.save_checkpoint(ckpt, network, result.final_iteration, 1, result.velocity)
restored, iteration, seed, _ = N.restore_network(N.load_checkpoint(ckpt))
print(f"\ncheckpoint {ckpt} restored at iteration {iteration}")

evaluation = predict.evaluate(restored, test_set, n_draws=50, coverage=0.95,
                              rng=KeyedRNG(7))
print(f"error rate with 50 predictive draws: {evaluation.error_rate:.4f}")
for key, count in sorted(evaluation.table.items()):
    print(f"  {key[0]:>7} & {key[1]:<9}: {count}")

# raw predictive draws for one image: the spread across draws is the
# uncertainty a box plot would show
index = next(i for i, r in enumerate(evaluation.reports) if not r.certain)
x = test_set.images[index : index + 1]
samples = predict.sample_outputs(restored, x, 200, KeyedRNG(7))[:, 0, :]
print(f"\nuncertain example {index} (true label "
      f"{int(test_set.labels[index])}), per-class predictive spread:")
for c in range(10):
    col = samples[:, c]
    print(f"  class {c}: median {np.median(col):.3f}  "
          f"IQR [{np.quantile(col, 0.25):.3f}, {np.quantile(col, 0.75):.3f}]")
