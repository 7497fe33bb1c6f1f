from itss.nn.layout import LayerLayout, ParamVector, flatten, unflatten
from itss.nn.model import (
    Gradients,
    Mask,
    Model,
    ModelSpec,
    apply_mask,
    backward,
    cross_entropy,
    forward_loss,
    hidden_layouts,
    init_model,
    loss_and_grad,
    predict_logits,
    with_hidden,
)

__all__ = [
    "Gradients",
    "LayerLayout",
    "Mask",
    "Model",
    "ModelSpec",
    "ParamVector",
    "apply_mask",
    "backward",
    "cross_entropy",
    "flatten",
    "forward_loss",
    "hidden_layouts",
    "init_model",
    "loss_and_grad",
    "predict_logits",
    "unflatten",
    "with_hidden",
]
