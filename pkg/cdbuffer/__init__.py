# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU General Public License for more details.

__license__ = 'GNU General Public License v3.0'
__version__ = "0.1.0"

from cdbuffer import io, model, tensor
from cdbuffer.adapt import AdaptState, StepReport, adapt_step, adapt_stream, evaluate
from cdbuffer.buffers import CDBuffer, MaskState
from cdbuffer.config import ExperimentConfig
from cdbuffer.corruption import CorruptionSpec, corrupt, severity_ladder
from cdbuffer.dataset import ToyDataset, gen_dataset
from cdbuffer.experiment import Experiment
from cdbuffer.model import ToyNet, train_source
from cdbuffer.stats import SourceStats, precompute_stats
