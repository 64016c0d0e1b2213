"""Learning continuous-time dynamics from samples of temporal marginals."""

from .field import (ActionField, FieldJet, MLPField, NonFiniteError, eval_bundle,
                    load_field, new_mlp_field, save_field)
from .paths import MarginalPath
from .objectives import (BatchSpec, LossEstimate, TimeProposal, WeightSchedule, action_gap,
                         am_loss, cam_loss, eam_loss, ssm_loss, uam_loss)
from .dynamics import (IntegratorConfig, ParticleEnsemble, ald_sample, integrate_ode,
                       integrate_sde, integrate_weighted, log_likelihood)
from .metrics import KernelSpec, field_error, mmd, wasserstein2
from .train import TrainConfig, TrainReport, train

__version__ = "0.1.0"
