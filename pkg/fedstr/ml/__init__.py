"""Desk-scale ML engine: models, losses, optimizers and parameter blobs."""

from fedstr.ml.data import (
    Dataset,
    make_classification,
    make_linear,
    split_dataset,
    train_test_split,
)
from fedstr.ml.models import (
    Activation,
    LossKind,
    LossSpec,
    ModelFamily,
    ModelSpec,
    evaluate_loss,
    grad,
    init_model,
    loss,
    loss_and_grad,
    total_loss,
)
from fedstr.ml.optim import (
    AdamWParams,
    InnerHyperparams,
    OuterState,
    RunOption,
    inner_optimize,
    outer_diloco,
    outer_fedavg,
)
from fedstr.ml.params import ModelParams, deserialize_params, serialize_params

__all__ = [
    "Activation",
    "AdamWParams",
    "Dataset",
    "InnerHyperparams",
    "LossKind",
    "LossSpec",
    "ModelFamily",
    "ModelParams",
    "ModelSpec",
    "OuterState",
    "RunOption",
    "deserialize_params",
    "evaluate_loss",
    "grad",
    "init_model",
    "inner_optimize",
    "loss",
    "loss_and_grad",
    "make_classification",
    "make_linear",
    "outer_diloco",
    "outer_fedavg",
    "serialize_params",
    "split_dataset",
    "total_loss",
    "train_test_split",
]
