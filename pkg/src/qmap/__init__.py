"""R2* mapping from mGRE magnitude data.

Voxel-wise NLLS baseline and a slice-wise CNN estimator trained through the
biophysical signal model, plus synthetic phantom datasets and evaluation.
"""

from .volumes import (EchoStack, FMap, Mask, NormRecord, ParamMap, QvolError,
                      compute_norm_factor, denormalize_s0, normalize,
                      read_qvol, write_qvol)
from .signal_model import (InhomogeneityField, VoxelParams, forward_complex,
                           forward_magnitude, forward_magnitude_volume,
                           jacobian_voxel, make_fmap_sinc)
from .nlls import FitConfig, FitResult, fit_volume, fit_voxel, init_loglinear
from .phantom import (DatasetManifest, NoiseSpec, PhantomSpec, add_noise,
                      build_dataset, make_phantom, synthesize_mgre)
from .network import (NetCheckpoint, NetConfig, load_checkpoint, net_forward,
                      net_gradients, net_infer_volume, net_init, save_checkpoint)
from .training import TrainConfig, TrainReport, loss_denoise, loss_selfsup, loss_supervised, train
from .evaluation import (REReport, benchmark_table, central_slice_range,
                         difference_map, export_png, relative_error,
                         timing_benchmark)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
