"""spikekws: a from-scratch spiking-transformer engine for speech-command
recognition, with surrogate-gradient BPTT training and synaptic-operation
energy profiling."""

__version__ = "0.1.0"

from .attention import (
    AttentionConfig,
    MultiViewAttention,
    TemporalMask,
    apply_temporal_mask,
    attend_global,
    attend_windowed,
    default_window_radius,
    global_attn_scale,
    window_attn_scale,
)
from .data import (
    AugmentConfig,
    DenseSample,
    EventSample,
    bin_and_discretize,
    event_drop,
    load_events,
    pad_and_mask,
    spec_mask,
    synth_dataset,
)
from .energy import EnergyReport, LayerCost, estimate_energy, fold_bn, fold_model, layer_flops, measure_firing_rate
from .model import (
    ModelConfig,
    SpikingTransformer,
    classify,
    cross_entropy_loss,
    load_checkpoint,
    save_checkpoint,
)
from .neuron import LifParams, LifState, SurrogateParams, lif_sequence, lif_step, surrogate_grad
from .tensor import (
    BatchNormState,
    Parameter,
    SpikeTensor,
    Tape,
    Tensor,
    backward,
    batchnorm,
    conv1d_depthwise,
    conv1d_pointwise,
    conv2d_depthwise_heads,
    linear,
    softmax,
)
from .trainer import AdamW, TrainConfig, cosine_lr, evaluate, train
