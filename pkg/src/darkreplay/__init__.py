"""Dark Experience Replay and companion rehearsal methods on MNIST streams."""
from .buffer import BufferEntry, EmptyBufferError, MemoryBuffer
from .data import Dataset, IdxError, Transform, load_idx, load_mnist
from .harness import ExperimentConfig, ResultsRecord, default_config, grid_search, multi_seed, run
from .methods import ConfigError, MethodConfig, make_learner
from .nn import DenseModel, LossSpec

__version__ = "0.1.0"
