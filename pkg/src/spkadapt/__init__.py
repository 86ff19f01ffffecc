"""Speaker adaptation of a small transformer ASR model by encoder pruning
and a frozen speaker memory, on a synthetic corpus."""

from .autodiff import Tape, Tensor, backward
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .decoding import beam_search, evaluate, greedy_decode
from .pruning import PruneMask, PruneSchedule, gate_gradients, magnitude_mask, prune_event
from .scoring import WerBreakdown, wer
from .speaker_memory import ConfigurationError, SpeakerMemoryBank, augment_kv, build_bank
from .synthdata import Corpus, SynthConfig, gen_corpus, read_corpus, write_corpus
from .training import RunLog, TrainConfig, adapt, train_base
from .transformer import Model, ModelConfig

__version__ = "0.1.0"
