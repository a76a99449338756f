from cocokit.data_eval.dataset import (
    DatasetError,
    LabeledImageSet,
    decode_image,
    encode_image,
    load_dataset,
    load_features,
    save_dataset,
    synth_finegrained,
)
from cocokit.data_eval.evaluation import (
    EvalReport,
    accuracy_percent,
    aggregate,
    config_hash,
    evaluate,
    stratified_kfold,
)
from cocokit.data_eval.stats import binomial_lower_tail, binomial_sign_test, bonferroni

__all__ = [
    "DatasetError",
    "EvalReport",
    "LabeledImageSet",
    "accuracy_percent",
    "aggregate",
    "binomial_lower_tail",
    "binomial_sign_test",
    "bonferroni",
    "config_hash",
    "decode_image",
    "encode_image",
    "evaluate",
    "load_dataset",
    "load_features",
    "save_dataset",
    "stratified_kfold",
    "synth_finegrained",
]
