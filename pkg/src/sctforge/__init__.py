"""CBCT to synthetic-CT translation with compact GANs, single-epoch training and KDE data cleaning."""

__version__ = "0.1.0"

from .cleaning import build_reference, classify_pair, clean_cohort, hu_kde, kde_distance
from .data import DatasetSplit, PatientVolumePair, SlicePair, load_patient, normalize_hu, save_patient, slice_pairs, split_dataset
from .errors import (
    CheckpointNotFound, ContractError, ExportError, IntegrityError, LoadError, ParameterError, SctForgeError,
    TrainingError,
)
from .evaluation import compute_metrics, evaluate_model, select_best, sweep_checkpoints, tissue_kde_compare
from .heuristic import optimal_p, token_count, tp_ratio
from .models import ArchConfig, build_model, count_parameters, generate_sct, variant
from .padding import constant_pad_to_factor, crop_to_original, prepare_batch, reflect_pad_to
from .phantom import AnomalyKind, PhantomParams, desk_params, generate_cohort, generate_phantom_patient, inject_anomaly
from .trainer import CheckpointKey, CheckpointStore, TrainConfig, build_gan_state, train_sem
