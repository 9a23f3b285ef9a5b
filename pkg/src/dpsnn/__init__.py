#   Copyright 2025 Alchemyst (https://alchemyst.dev), Blockmage Ltd
#   (https://blockmage.dev), and Contributors.
#
#   Licensed under the Apache License, Version 2.0 (the "License");
#   you may not use this file except in compliance with the License.
#   You may obtain a copy of the License at
#
#       http://www.apache.org/licenses/LICENSE-2.0
#
#   Unless required by applicable law or agreed to in writing, software
#   distributed under the License is distributed on an "AS IS" BASIS,
#   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
#   See the License for the specific language governing permissions and
#   limitations under the License.


# Neurons
from ._neuron import MembraneState as MembraneState
from ._neuron import NeuronKind as NeuronKind
from ._neuron import NeuronParams as NeuronParams
from ._neuron import if_step as if_step
from ._neuron import lif_step as lif_step
from ._neuron import neuron_step as neuron_step
from ._neuron import surrogate_grad as surrogate_grad

# Layers
from ._layers import PoolMethod as PoolMethod
from ._layers import conv2d_backward as conv2d_backward
from ._layers import conv2d_forward as conv2d_forward
from ._layers import dense_backward as dense_backward
from ._layers import dense_forward as dense_forward
from ._layers import group_norm_backward as group_norm_backward
from ._layers import group_norm_forward as group_norm_forward
from ._layers import instance_norm_backward as instance_norm_backward
from ._layers import instance_norm_forward as instance_norm_forward
from ._layers import output_loss as output_loss
from ._layers import pool_avg_backward as pool_avg_backward
from ._layers import pool_avg_forward as pool_avg_forward
from ._layers import pool_max_backward as pool_max_backward
from ._layers import pool_max_forward as pool_max_forward
from ._layers import tep_backward as tep_backward
from ._layers import tep_forward as tep_forward

# Networks
from ._network import ConvBlock as ConvBlock
from ._network import Dense as Dense
from ._network import GlobalPool as GlobalPool
from ._network import NetworkSpec as NetworkSpec
from ._network import ParameterSet as ParameterSet
from ._network import Pool as Pool
from ._network import build_network as build_network
from ._network import mnist_small as mnist_small
from ._network import ordering_hash as ordering_hash
from ._network import parameter_layout as parameter_layout
from ._network import vgg_cifar as vgg_cifar

# Backpropagation through time
from ._bptt import Tape as Tape
from ._bptt import backward_batch as backward_batch
from ._bptt import backward_sample as backward_sample
from ._bptt import forward_batch as forward_batch
from ._bptt import forward_sample as forward_sample
from ._bptt import per_sample_gradients as per_sample_gradients

# Differential privacy
from ._accountant import DEFAULT_ORDERS as DEFAULT_ORDERS
from ._accountant import PrivacyLedger as PrivacyLedger
from ._accountant import calibrate_sigma as calibrate_sigma
from ._accountant import compose_step as compose_step
from ._accountant import epsilon_for as epsilon_for
from ._accountant import rdp_gaussian as rdp_gaussian
from ._accountant import rdp_subsampled_gaussian as rdp_subsampled_gaussian
from ._accountant import to_eps_delta as to_eps_delta
from ._dp_optimizer import AdamWConfig as AdamWConfig
from ._dp_optimizer import DpConfig as DpConfig
from ._dp_optimizer import OptimizerState as OptimizerState
from ._dp_optimizer import adamw_update as adamw_update
from ._dp_optimizer import aggregate_and_noise as aggregate_and_noise
from ._dp_optimizer import clip_gradient as clip_gradient
from ._dp_optimizer import clip_gradients as clip_gradients

# Data
from ._data import Encoding as Encoding
from ._data import LabeledImageSet as LabeledImageSet
from ._data import Poisson as Poisson
from ._data import Shuffle as Shuffle
from ._data import encode_direct as encode_direct
from ._data import encode_rate as encode_rate
from ._data import load_cifar10_binary as load_cifar10_binary
from ._data import load_dataset as load_dataset
from ._data import load_idx as load_idx
from ._data import make_batches as make_batches
from ._data import synth_dataset as synth_dataset
from ._data import write_idx as write_idx

# Training
from ._checkpoint import Checkpoint as Checkpoint
from ._checkpoint import checkpoint_load as checkpoint_load
from ._checkpoint import checkpoint_save as checkpoint_save
from ._config import UNSET as UNSET
from ._config import RunConfig as RunConfig
from ._trainer import MetricsRow as MetricsRow
from ._trainer import TrainResult as TrainResult
from ._trainer import evaluate as evaluate
from ._trainer import train as train
from ._trainer import train_runs as train_runs

# Exceptions
from ._exceptions import CalibrationError as CalibrationError
from ._exceptions import CheckpointFormatError as CheckpointFormatError
from ._exceptions import ContractViolationError as ContractViolationError
from ._exceptions import DpsnnError as DpsnnError
from ._exceptions import IdxFormatError as IdxFormatError
from ._exceptions import NumericError as NumericError
from ._exceptions import PrivacyBudgetExceeded as PrivacyBudgetExceeded
from ._exceptions import StructuralError as StructuralError

__all__ = (
    'DEFAULT_ORDERS',
    'UNSET',
    'AdamWConfig',
    'CalibrationError',
    'Checkpoint',
    'CheckpointFormatError',
    'ContractViolationError',
    'ConvBlock',
    'Dense',
    'DpConfig',
    'DpsnnError',
    'Encoding',
    'GlobalPool',
    'IdxFormatError',
    'LabeledImageSet',
    'MembraneState',
    'MetricsRow',
    'NetworkSpec',
    'NeuronKind',
    'NeuronParams',
    'NumericError',
    'OptimizerState',
    'ParameterSet',
    'Poisson',
    'Pool',
    'PoolMethod',
    'PrivacyBudgetExceeded',
    'PrivacyLedger',
    'RunConfig',
    'Shuffle',
    'StructuralError',
    'Tape',
    'TrainResult',
    'adamw_update',
    'aggregate_and_noise',
    'backward_batch',
    'backward_sample',
    'build_network',
    'calibrate_sigma',
    'checkpoint_load',
    'checkpoint_save',
    'clip_gradient',
    'clip_gradients',
    'compose_step',
    'conv2d_backward',
    'conv2d_forward',
    'dense_backward',
    'dense_forward',
    'encode_direct',
    'encode_rate',
    'epsilon_for',
    'evaluate',
    'forward_batch',
    'forward_sample',
    'group_norm_backward',
    'group_norm_forward',
    'if_step',
    'instance_norm_backward',
    'instance_norm_forward',
    'lif_step',
    'load_cifar10_binary',
    'load_dataset',
    'load_idx',
    'make_batches',
    'mnist_small',
    'neuron_step',
    'ordering_hash',
    'output_loss',
    'parameter_layout',
    'per_sample_gradients',
    'pool_avg_backward',
    'pool_avg_forward',
    'pool_max_backward',
    'pool_max_forward',
    'rdp_gaussian',
    'rdp_subsampled_gaussian',
    'surrogate_grad',
    'synth_dataset',
    'tep_backward',
    'tep_forward',
    'to_eps_delta',
    'train',
    'train_runs',
    'vgg_cifar',
    'write_idx',
)
