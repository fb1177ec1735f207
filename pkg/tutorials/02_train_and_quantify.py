"""Train a small Bayesian classifier and quantify its uncertainty.

Three Gaussian blobs in the plane, a 2-16-3 Bayesian multilayer perceptron,
and the stabilize -> sample -> forward -> backward -> momentum-step loop.
Afterwards the posterior predictive is estimated from many parameter draws,
and each prediction is labelled certain or uncertain by whether the credible
interval of the winning class clears all the others.
"""

import numpy as np

from corrbnn import data, layers as L, net as N, predict
from corrbnn.corrgauss import PriorSpec
from corrbnn.rng import KeyedRNG

train_set = data.synthetic_blobs(classes=3, per_class=250, dims=2,
                                 separation=5.0, seed=2)
test_set = train_set.subset(np.arange(600, 750))
train_set = train_set.subset(np.arange(600))

keyed = KeyedRNG(0)
network = N.Network([
    L.BayesDense(2, 16, keyed.generator("init", 0),
                 PriorSpec(np.zeros(32), 1.0), PriorSpec(np.zeros(16), 1.0)),
    L.ReLU(),
    L.BayesDense(16, 3, keyed.generator("init", 1),
                 PriorSpec(np.zeros(48), 1.0), PriorSpec(np.zeros(3), 1.0)),
])

config = N.TrainConfig(
    batch_size=50, iterations=600, base_lr=0.05, momentum=0.9,
    beta=len(train_set), kl_reduction=10.0, seed=0, log_every=100,
)
print(f"KL weight nu = 1/(beta * kl_reduction) = {config.nu:.2e}\n")

result = N.train(network, train_set, config, test_set=test_set)
for step, lr, loss, err in result.log:
    print(f"iter {step:4d}  lr {lr:.4f}  loss {loss:7.4f}  test_err {err:.3f}")

# posterior predictive with 100 parameter draws
evaluation = predict.evaluate(network, test_set, n_draws=100, coverage=0.95,
                              rng=KeyedRNG(99))
print(f"\nerror rate over {len(test_set)} held-out points: "
      f"{evaluation.error_rate:.3f}")
print("certainty table (rows: outcome, columns: certainty):")
for outcome in ("correct", "wrong"):
    certain = evaluation.table[(outcome, "certain")]
    uncertain = evaluation.table[(outcome, "uncertain")]
    print(f"  {outcome:>7}:  certain {certain:4d}   uncertain {uncertain:4d}")

# a closer look at one uncertain example, if there is one
for i, rep in enumerate(evaluation.reports):
    if not rep.certain:
        print(f"\nexample {i}: predicted class {rep.predicted_class}, "
              f"true class {int(test_set.labels[i])}")
        for c in range(3):
            lo, hi = rep.intervals[c]
            print(f"  class {c}: mean {rep.probs[c]:.3f}  "
                  f"95% interval [{lo:.3f}, {hi:.3f}]")
        break
else:
    print("\nevery prediction was certain at 95% coverage")
