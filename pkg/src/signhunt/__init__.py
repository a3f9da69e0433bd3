"""Black-box adversarial sample toolkit.

Sign hypotheses for an opaque classifier's gradient are evolved by
differential evolution; an iterative sign-step driver turns them into
L-inf-bounded adversarial images; a campaign harness measures success rate,
distance, queries, and transferability.
"""

from .attack import (AttackConfig, AttackResult, MIFGSMConfig, StepState,
                     bmi_fgsm, is_adversarial, mi_fgsm_reference,
                     random_sign_attack, reuse_candidates)
from .data import Dataset, blob_dataset, load_dataset, pattern_dataset
from .de import (DEParams, FitnessSpec, Population, approx_gradient_signs,
                 crossover, evaluate, fitness, init_population, mutate, select)
from .errors import (BudgetExceeded, CampaignAborted, ContractViolation,
                     CorruptModel, ProtocolError, RemoteUnavailable,
                     TrainingFailed)
from .harness import (Campaign, TransferSample, confidence_trace, run_campaign,
                      summarize, transfer_eval)
from .models import (LayerSpec, LocalClassifier, Model, PredictionVector,
                     QueryBudget, UNLIMITED, classify, in_top_k, load_model,
                     numeric_gradient, save_model, top_label, train_toy)
from .remote import RemoteClassifier, RemoteEndpoint, remote_classify
from .tensors import (ImageTensor, RngStream, SignCandidate, clip_unit,
                      derive_seed, linf_distance, load_png, load_tf32, perturb,
                      random_sign_tensor, save_png, save_tf32)

__version__ = "0.1.0"
