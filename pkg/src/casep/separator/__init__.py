"""Separating network, its losses, and checkpoint I/O."""

from casep.separator.losses import (
    Batch,
    LossContractError,
    LossWeights,
    latent_loss_total,
    latent_loss_x,
    latent_loss_y,
    multi_salient_losses,
    observation_recon_loss,
    salient_norm_penalty,
    total_objective,
    total_separation_loss,
)
from casep.separator.model import (
    FactorPair,
    SeparatorParams,
    SeparatorSpec,
    factor_nodes,
    init_separator,
    leak_separator,
    oracle_separator,
    split,
    swap,
)

__all__ = [
    "Batch", "LossContractError", "LossWeights", "latent_loss_total", "latent_loss_x", "latent_loss_y",
    "multi_salient_losses", "observation_recon_loss", "salient_norm_penalty", "total_objective",
    "total_separation_loss", "FactorPair", "SeparatorParams", "SeparatorSpec", "factor_nodes",
    "init_separator", "leak_separator", "oracle_separator", "split", "swap",
]
