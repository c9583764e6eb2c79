"""Counterattacks against adversarial images on a toy zero-shot dual encoder.

Modules: ``autograd`` (tape autodiff), ``model`` (encoder, training,
checkpoints), ``attacks``, ``defenses``, ``stability`` (drift-ratio analyses),
``harness`` (evaluation and reports), ``cli`` and sklearn-style ``estimators``.
"""

from .attacks import AttackConfig, adaptive_attack, cw_attack, feature_attack, pgd_attack, run_attack
from .autograd import DegenerateInputError, DimensionError, Tape, Tensor, gradcheck
from .data import Dataset, generate_synthetic, load_idx, train_test_split
from .defenses import (CounterattackConfig, anti_adversary_defend, exp_weights, hedge_defend, rn_defend,
                       tte_classify, ttc_defend, ttc_defend_batch)
from .estimators import AttackTransformer, CounterattackTransformer, ZeroShotClassifier
from .harness import EvalReport, RunConfig, evaluate, write_report
from .model import (Architecture, DualEncoder, TrainConfig, class_scores, encode_image, finetune_tecoa,
                    load_checkpoint, save_checkpoint, train_clean)
from .stability import (TauScanResult, encoder_sensitivity_report, jacobian_activation_compare,
                        jacobian_drift_check, tau, tau_scan)

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "adaptive_attack", "cw_attack", "feature_attack", "pgd_attack", "run_attack",
    "DegenerateInputError", "DimensionError", "Tape", "Tensor", "gradcheck",
    "Dataset", "generate_synthetic", "load_idx", "train_test_split",
    "CounterattackConfig", "anti_adversary_defend", "exp_weights", "hedge_defend", "rn_defend",
    "tte_classify", "ttc_defend", "ttc_defend_batch",
    "AttackTransformer", "CounterattackTransformer", "ZeroShotClassifier",
    "EvalReport", "RunConfig", "evaluate", "write_report",
    "Architecture", "DualEncoder", "TrainConfig", "class_scores", "encode_image", "finetune_tecoa",
    "load_checkpoint", "save_checkpoint", "train_clean",
    "TauScanResult", "encoder_sensitivity_report", "jacobian_activation_compare", "jacobian_drift_check",
    "tau", "tau_scan",
]
