'''Backbone network, RoI cropping and source-domain training.'''

from cdbuffer.model.layers import BatchNorm2d, Conv2d, Linear
from cdbuffer.model.net import BasicBlock, BufferHooks, ToyNet
from cdbuffer.model.roi import roi_crop, scale_boxes
from cdbuffer.model.trainer import Trainer, accuracy, predict, train_source
