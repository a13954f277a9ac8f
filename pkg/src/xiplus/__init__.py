"""Uncertainty-aware speaker embeddings with Gaussian posterior pooling."""

from .errors import (ConfigError, DataError, DivergenceError, MissingCentroidError, NumericalError,
                     ShapeError, StaleCacheError, XiPlusError)
from .gausscore import (DiagonalGaussian, FrameSequence, UtteranceGaussian, posterior_pool,
                        posterior_pool_grad, prior_init)
from .losses import (AamParams, CentroidTable, SvlParams, aam_loss, build_centroids, kappa,
                     svl_loss, total_loss)
from .momentprop import (BnState, FcParams, ProjectedGaussian, TwinBranch, bn_forward,
                         bn_var_forward, fc_forward, fc_var_forward, momentprop_backward)
from .scoring import (ScoreReport, Trial, compute_eer, compute_min_dcf, cosine_score, evaluate,
                      min_dcf, rho_policy)
from .uhead import (FrameBeliefs, UncertaintyHeadParams, attention_forward, estimate_beliefs,
                    init_uhead_params, uhead_backward)

__version__ = "0.1.0"
