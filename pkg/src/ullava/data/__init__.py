from .dataset_io import load_dataset, write_dataset
from .rle import RleMask, mask_to_bbox, rle_decode, rle_encode
from .salient import BuildReport, SalientRecord, build_salient15k
from .templates import ANSWER_POOLS, USER_POOLS, TemplatePool, instantiate_template
from .visuals import VisualStore

__all__ = [
    "ANSWER_POOLS",
    "BuildReport",
    "RleMask",
    "SalientRecord",
    "TemplatePool",
    "USER_POOLS",
    "VisualStore",
    "build_salient15k",
    "instantiate_template",
    "load_dataset",
    "mask_to_bbox",
    "rle_decode",
    "rle_encode",
    "write_dataset",
]
