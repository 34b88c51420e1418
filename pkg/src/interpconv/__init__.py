"""Interpretable conv-layers: part templates, masked forward pass, and the
mutual-information filter loss, inside a small deterministic CNN engine."""

__version__ = "0.1.0"

from .interp import (
    InterpConv2D,
    InterpFilterState,
    assign_target_category,
    combined_gradient,
    filter_loss_decomposed,
    filter_loss_exact,
    filter_loss_grad_approx,
    filter_loss_grad_exact,
    mask_backward,
    mask_forward,
    select_template,
    update_lambda,
    update_running_stats,
)
from .templates import (
    Template,
    TemplateBank,
    build_bank,
    build_negative_template,
    build_positive_template,
    trace_product,
)

__all__ = [
    "InterpConv2D",
    "InterpFilterState",
    "Template",
    "TemplateBank",
    "assign_target_category",
    "build_bank",
    "build_negative_template",
    "build_positive_template",
    "combined_gradient",
    "filter_loss_decomposed",
    "filter_loss_exact",
    "filter_loss_grad_approx",
    "filter_loss_grad_exact",
    "mask_backward",
    "mask_forward",
    "select_template",
    "trace_product",
    "update_lambda",
    "update_running_stats",
]
