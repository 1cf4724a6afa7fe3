"""Analytic adaptation-cost model.

Costs are counted two ways: exact per-batch pass counts (one forward = one
model evaluation of one batch) and a parameter-scaled FLOP estimate with the
documented convention that a backward pass costs twice its forward.  The
per-variant pass formulas assume the default protocol: buffer energies under
the frozen source model are precomputed once per episode, and buffer
augmentation is off (augmentation adds one source-model forward per batch).
"""

from __future__ import annotations

#: per-batch (forwards, backwards) for each loss variant, default protocol.
PASS_FORMULAS = {
    "cretta": (3, 1),
    "nce_residual": (3, 1),
    "nce_non_residual": (3, 1),
    "no_contrastive_sigma": (2, 1),
    "pairwise_non_residual": (2, 1),
    "no_contrastive": (1, 1),
    "entropy_tent": (1, 1),
    "pseudo_label": (1, 1),
    "bn_only": (1, 0),
}

BACKWARD_TO_FORWARD = 2.0


def expected_passes(loss_variant: str, batches: int, augmented: bool = False):
    """(forwards, backwards) after `batches` adaptation steps."""
    f, b = PASS_FORMULAS[loss_variant]
    if augmented and loss_variant in ("cretta", "nce_residual",
                                      "nce_non_residual",
                                      "pairwise_non_residual"):
        f += 1
    return f * batches, b * batches


def forward_flops(widths, batch_size: int) -> float:
    """FLOPs of one forward pass: 2*m*n*k per affine plus per-element costs
    for bias, batch norm (8 ops/element), ReLU, and the energy reduction."""
    total = 0.0
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        total += 2.0 * batch_size * fan_in * fan_out + batch_size * fan_out
    for width in widths[1:-1]:
        total += 9.0 * batch_size * width  # batch norm + relu
    total += 3.0 * batch_size * widths[-1]  # log-sum-exp energy head
    return total


def step_flops(widths, batch_size: int, forwards: int, backwards: int) -> float:
    f = forward_flops(widths, batch_size)
    return forwards * f + backwards * BACKWARD_TO_FORWARD * f


def cretta_step_flops(widths, batch_size: int) -> float:
    f, b = PASS_FORMULAS["cretta"]
    return step_flops(widths, batch_size, f, b)


def sgld_pipeline_step_flops(widths, batch_size: int, sgld_steps: int = 20) -> float:
    """Per-batch cost of an energy-training pipeline that draws negatives by
    Langevin sampling: each of the K sampling steps needs a forward plus an
    input-gradient backward on the negative batch, then one forward each on
    the positive and final negative batches and one parameter backward."""
    f = forward_flops(widths, batch_size)
    sampling = sgld_steps * (f + BACKWARD_TO_FORWARD * f)
    closing = 2.0 * f + BACKWARD_TO_FORWARD * f
    return sampling + closing


def sgld_to_cretta_ratio(widths, batch_size: int, sgld_steps: int = 20) -> float:
    return (sgld_pipeline_step_flops(widths, batch_size, sgld_steps)
            / cretta_step_flops(widths, batch_size))
