"""Cross-teaching segmentation with registration supervision."""

from ._core import (
    ablate,
    default_config,
    dsc,
    evaluate,
    evaluate_reg_only,
    generate,
    hd95,
    infer,
    make_phantom,
    mutual_information,
    prepare_rsl,
    register_pairs,
    register_volumes,
    resample_volume,
    rmse,
    train,
    w_cps_schedule,
)

__all__ = [
    "ablate",
    "default_config",
    "dsc",
    "evaluate",
    "evaluate_reg_only",
    "generate",
    "hd95",
    "infer",
    "make_phantom",
    "mutual_information",
    "prepare_rsl",
    "register_pairs",
    "register_volumes",
    "resample_volume",
    "rmse",
    "train",
    "w_cps_schedule",
]
