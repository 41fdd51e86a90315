"""PyTorch bridge for the specprune planner: activation export, weight-level
plan application, and a mixup fine-tuning demo."""

from .apply_plan import apply_plan_to_weights
from .export import default_export_nodes, export_activations
from .finetune_demo import finetune_mixup_demo, soft_cross_entropy
from .graph_model import GraphModel, build_model_from_graph
from .toy_model import make_identity_block, toy_graph, toy_model

__version__ = "0.1.0"
