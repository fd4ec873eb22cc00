"""Label-conditioned variational autoencoder for generating battery charging curves."""
from .errors import (DataError, FormatError, HpoError, LabelLookupError, NumericError, RcvaeError,
                     ShapeError, SpecError, StateError, UnsupportedVersionError)
from .labels import LabelKey, LabelVocab, match_similar
from .model import RcvaeConfig, RcvaeParams, forward, generate
from .numcore import Rng
from .trainer import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
