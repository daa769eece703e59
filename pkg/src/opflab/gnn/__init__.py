from .layers import (
    attention_mask,
    gat_layer,
    gcn_layer,
    gin_layer,
    graph_transformer_layer,
    heterognn_layer,
    hgt_layer,
    mean_aggregation_layer,
)
from .model import (
    ARCHITECTURES,
    Batch,
    ModelConfig,
    Prediction,
    TopologyContext,
    cast_params,
    init_params,
    model_forward,
)
