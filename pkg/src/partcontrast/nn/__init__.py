from .checkpoint import build_model, load_checkpoint, read_meta, save_checkpoint
from .heads import ClusterNet, ContrastNet, DenseHead, cluster_forward, contrast_forward, cross_entropy
from .layers import (EdgeConv, Encoder, EncoderConfig, SpatialTransform, edge_conv, encode, knn_graph,
                     knn_indices, spatial_transform)
from .train import History, TrainConfig, lr_at, train_cluster, train_contrast
