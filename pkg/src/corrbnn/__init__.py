"""Bayesian deep learning with layer-wise tridiagonal Gaussian posteriors.

Variational inference where each layer's weights (and, separately, biases)
follow a multivariate normal whose covariance is tridiagonal: variances are
tau^2 * mean^2 and all neighbour correlations share a single rho.  Training,
posterior-predictive inference with credible intervals, and a numerical
verification suite are included.
"""

import os as _os

# Pin the BLAS thread pools before numpy loads them, so results cannot depend
# on the machine's core count.  Opt in via CORRBNN_THREADS=<n>.
_threads = _os.environ.get("CORRBNN_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from . import corrgauss, data, layers, net, predict, rng, verify

__all__ = ["corrgauss", "data", "layers", "net", "predict", "rng", "verify"]
__version__ = "0.1.0"
