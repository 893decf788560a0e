"""Two-phase claim/evidence/link pipeline on a small data-parallel engine."""

from ._kernels import BACKEND
from .engine import Broadcast, Dataset, Engine, EngineConfig, KeyedRecord
from .model import FeatureVector, ModelBundle, SvmModel, dot, load_model, save_model, score, score_pair
from .pipeline import LinkResult, PipelineConfig, run_batch, run_sequential_reference
from .stream import StreamConfig
from .textproc import Sentence, StemDictionary, extract_features, split_sentences, stem

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "Broadcast", "Dataset", "Engine", "EngineConfig", "FeatureVector", "KeyedRecord", "LinkResult",
    "ModelBundle", "PipelineConfig", "Sentence", "StemDictionary", "StreamConfig", "SvmModel", "dot",
    "extract_features", "load_model", "run_batch", "run_sequential_reference", "save_model", "score",
    "score_pair", "split_sentences", "stem",
]
