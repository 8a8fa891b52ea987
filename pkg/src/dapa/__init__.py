"""Domain-adaptive parallel attention for dyadic engagement estimation.

A self-contained stack: a numpy-backed reverse-mode autodiff core, BiLSTM /
cross-attention layers, the prompted dyadic network with its CCC objective,
corpus windowing and synthesis, an Adam + warmup-cosine + EMA trainer, and
CCC evaluation tooling.
"""

from .data import (Corpus, SessionRecord, SyntheticSpec, WindowSample,
                   generate_synthetic_corpus, load_manifest, read_feature_matrix,
                   read_matrix, segment_matrix, segment_windows,
                   stitch_predictions, write_matrix)
from .errors import (ConfigError, DapaError, DataError, DimensionError,
                     DomainLookupError, FormatError, NumericError, UsageError)
from .gradcheck import run_suite
from .layers import (AttentionParams, LinearParams, LstmStackParams,
                     bilstm_forward, linear_forward, mlp_head_forward,
                     scaled_dot_attention)
from .metrics import EvalReport, ccc, ccc_with_flag, evaluate_corpus, export_predictions
from .model import (DapaLayerParams, DapaModel, DomainPromptPool, ModelConfig,
                    attach_prompt, ccc_loss, encode_context,
                    expected_parameter_count, forward, forward_batch,
                    fuse_alignments, parallel_cross_attention)
from .rng import RngStream, derive_seed
from .tensor import Tensor, backward, finite_diff_check, no_grad
from .train import (AdamState, EmaState, TrainConfig, TrainResult, adam_step,
                    ema_update, ema_weights, load_checkpoint, lr_at,
                    run_training, save_checkpoint)

__version__ = "0.1.0"
