"""Multi-layer block-sparse coding network for orthographic non-rigid structure from motion."""

from .data import (SynthConfig, TrackFrame, TrackSet, add_noise, center_frames,
                   generate_synthetic, load_tracks, save_tracks, zero_fill_missing)
from .evaluation import (EvalReport, align_orthonormal, coherence_error_series, noise_sweep,
                         normalized_3d_error)
from .exceptions import (NRSfMError, ShapeError, NumericalFailure,
                         DegenerateCameraError, GradientInstabilityError,
                         DivergenceError, IllPosedDictionaryError,
                         PoisonedStepError, TrainingCollapseError,
                         EmptyHistoryError, InsufficientObservationsError,
                         InsufficientDataError, DegenerateAlignmentError,
                         TrackParseError, ConfigError)
from .network import (ForwardTrace, LayerSizes, ModelParams, backward, decode, encode, forward,
                      init_params, layer_sizes, predict_shapes, recover_camera, recover_code)
from .numerics import polar_project, random_orthonormal_camera, soft_threshold, svd_thin
from .sparse import (block_ista, block_soft_threshold_approx, block_soft_threshold_exact, ista,
                     mutual_coherence, single_iter_block_encode)
# the training loop itself is ``deep_nrsfm.train.train``; re-exporting it here
# would shadow the ``deep_nrsfm.train`` module attribute
from .train import (CheckpointRecord, TrainConfig, TrainState, adam_step, load_checkpoint,
                    save_checkpoint, select_checkpoint)

__version__ = "0.1.0"
