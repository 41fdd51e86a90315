"""Structural pruning planner driven by CKA similarity and spectral
clustering, with model cost accounting and an RF spectrogram pipeline."""

from .activations import (ActivationSet, FlatView, channel_view, layer_view,
                          read_activations, write_activations)
from .errors import (ConvergenceError, DegenerateInputError, RecordRejected,
                     ValidationError)
from .graph import (CostReport, ModelGraph, Node, apply_plan,
                    bundled_graph_path, count_cost, graph_from_dict,
                    load_graph, propagate_shapes, validate_plan, write_graph)
from .planner import (LayerStage, PruningPlan, hierarchical_plan,
                      identity_plan, plan_channels, plan_layers, read_plan,
                      write_plan)
from .signals import (IqRecord, Spectrogram, inject_awgn, mixup,
                      normalize_truncate, spectrogram_image, stft_spectrogram)
from .similarity import (GramMatrix, SimilarityMatrix, channel_similarity,
                         cka, gram, hsic1, layer_similarity)
from .spectral import (Clustering, Laplacian, SpectralEmbedding, eig_sym,
                       embed, eigengaps, kmeans, normalized_laplacian,
                       spectral_cluster)

__version__ = "0.1.0"
