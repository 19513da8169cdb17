from .tensor import Tensor, he_normal
from .layers import (BatchNorm2d, Conv2d, Dense, GlobalAvgPool, Layer, ReLU,
                     Residual, Sequential, softmax)
from .network import (Network, NetworkSpec, build_encoder, build_head,
                      build_network, load_blobs_into)
from .optim import Adam, SgdMomentum
from .checkpoint import (FORMAT_VERSION, CheckpointError, ModelCheckpoint,
                         load_checkpoint, network_blobs, save_checkpoint)
from .gradcheck import check_module, fd_check_function, relative_error, run_suite
