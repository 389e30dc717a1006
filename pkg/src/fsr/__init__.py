"""Feature shuffling and restoration for unsupervised anomaly detection."""

from .config import RunConfig, load_config, preset
from .core import add_positions, detokenize, positional_table, random_shuffle, tokenize
from .model import FSRModel
from .objective import restoration_loss
from .scoring import anomaly_map, auroc, pixel_auroc

__version__ = "0.1.0"
