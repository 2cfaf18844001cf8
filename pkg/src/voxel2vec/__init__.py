"""Skip-gram embeddings of scalar values in volumetric data."""

__version__ = "0.1.0"

from .model import (EmbeddingModel, init_model, load_embedding, objective, predict_distribution,
                    predict_symbol, save_embedding, score_matrix, train, train_step)
from .multivar import FeatureSet, classify_features, dbscan, export_label_volume, project_features
from .sampler import NegativeDistribution, SelfPacedState, TrainConfig, context_of, draw_negatives, voxel_stream
from .similarity import SimilarityMap, similarity, similarity_map
from .transfer import (AssociationMatrix, VolumeCollection, association, association_matrix,
                       ensemble_projection, prediction_similarity, transfer_predict)
from .volume import (SymbolTable, SymbolVolume, Volume, VolumeDescriptor, gen_abc_flow,
                     load_raw_volume, quantize, symbolize, symbolize_collection)

__all__ = [name for name in dir() if not name.startswith("_")]
