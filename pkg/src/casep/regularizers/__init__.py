"""Adversarial and mutual-information regularizers for factor separation."""

from casep.regularizers.adversarial import (
    MODES,
    Adversaries,
    ContractError,
    Factors,
    adversary_losses,
    disc_accuracy,
    disc_adversarial_loss,
    fit_adversaries,
    fool_terms,
    make_adversaries,
    regressor_adversarial_loss,
)
from casep.regularizers.mi import (
    MiEstimate,
    derangement,
    digamma,
    disc_mi_estimate,
    knn_mi_estimate,
    mine_estimate,
    shuffle_pairs,
)

__all__ = [
    "MODES", "Adversaries", "ContractError", "Factors", "adversary_losses", "disc_accuracy",
    "disc_adversarial_loss", "fit_adversaries", "fool_terms", "make_adversaries",
    "regressor_adversarial_loss", "MiEstimate", "derangement", "digamma", "disc_mi_estimate",
    "knn_mi_estimate", "mine_estimate", "shuffle_pairs",
]
