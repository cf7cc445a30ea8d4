"""Adversarial training for semantic segmentation on toy scenes."""

from ._core import (  # noqa: F401
    VOID,
    bce_loss,
    channel_softmax,
    confusion,
    conv2d,
    encode_product,
    encode_scaling,
    evaluate,
    generate_scene,
    gradcheck_suite,
    local_contrast_normalize,
    maxpool2,
    mce_loss,
    one_hot,
    receptive_field,
    run_command,
    sigmoid,
)
