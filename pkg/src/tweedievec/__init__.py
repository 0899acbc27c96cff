"""Dense token/item embeddings from sparse co-occurrence counts.

The regression surface models each count as compound Poisson-Gamma with a
log link on the dot product of row and column vectors; estimation
alternates Fisher-scoring block updates between the two sides.
"""

from .cooccur import (CooccurrenceStore, RowStats, Vocabulary, apply_log1p,
                      build_vocab, check_symmetry, compute_row_stats,
                      count_cooccurrences, read_corpus)
from .dispersion import DispersionInterval, DispersionTable, assign, fit_table
from .model import (DispersionAssignment, EmbeddingParams, EvalCounters,
                    SparseRow, col_information, col_score, linear_predictor,
                    row_information, row_score, total_loss)
from .optimizer import (AdamState, ConvergenceConfig, FisherConfig, adam_step,
                        fisher_step, relative_loss_change)
from .simulate import SimSpec, compare_optimizers, generate
from .trainer import (Checkpoint, TrainConfig, TrainingHistory, init_params,
                      load_checkpoint, prefetch_rows, save_checkpoint, train,
                      update_row_block)
from .tweedie import (CPGParams, NaturalParams, TweedieParams, cell_loss,
                      from_cpg, log_density, sample_cpg, sample_cpg_many,
                      to_cpg, to_natural, zero_probability)

__version__ = "0.1.0"

__all__ = [
    "AdamState", "CPGParams", "Checkpoint", "ConvergenceConfig",
    "CooccurrenceStore", "DispersionAssignment", "DispersionInterval",
    "DispersionTable", "EmbeddingParams", "EvalCounters", "FisherConfig",
    "NaturalParams", "RowStats", "SimSpec", "SparseRow", "TrainConfig",
    "TrainingHistory", "TweedieParams", "Vocabulary", "adam_step",
    "apply_log1p", "assign", "build_vocab", "cell_loss", "check_symmetry",
    "col_information", "col_score", "compare_optimizers", "compute_row_stats",
    "count_cooccurrences", "fisher_step", "fit_table", "from_cpg", "generate",
    "init_params", "linear_predictor", "load_checkpoint", "log_density",
    "prefetch_rows", "read_corpus", "relative_loss_change", "row_information",
    "row_score", "sample_cpg", "sample_cpg_many", "save_checkpoint",
    "to_cpg", "to_natural", "total_loss", "train", "update_row_block",
    "zero_probability",
]
