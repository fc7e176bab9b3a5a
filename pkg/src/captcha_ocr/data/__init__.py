from .augment import AugmentationConfig, AugmentParams, apply_params, augment, sample_params
from .dataset import (
    IMAGE_SUFFIXES,
    BalanceReport,
    DatasetError,
    Sample,
    SplitSpec,
    class_balance_report,
    load_dataset,
    oversample_minority,
    read_manifest,
    split_dataset,
    write_corpus,
)
from .preprocess import ImageError, preprocess
from .synth import SynthesisError, glyph_order_matches, random_texts, synthesize_captcha, synthesize_corpus
