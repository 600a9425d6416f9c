"""Type-class prediction for dynamically typed programs: inside-outside
recursive networks over statically transformed program trees."""

from .astmodel import (ClassSet, Dataset, DatasetError, Label, LabeledTree,
                       TreeNode, TypeClass, Vocabulary, load_default_vocabulary,
                       parse_dataset, serialize_dataset, token_index,
                       validate_tree)
from .autodiff import ParameterStore, Tape, Tensor, backward, grad_check
from .iornn import Model, ModelSpec, forward, init_model
from .training import (Metrics, TrainConfig, baseline_majority, baseline_random,
                       evaluate_topk, kfold_split, run_experiment_grid, train)
from .transforms import (AugmentedTree, ScopeTable, SinkNode, add_sink_nodes,
                         detach_sinks, resolve_scopes, restructure)

__version__ = "0.1.0"
