"""Learned voxel point-cloud geometry codec.

A 3D-convolutional autoencoder with a hyperprior entropy model, a
carry-less range coder, top-k occupancy decoding and an RD evaluation
toolkit, built on numpy and scipy.
"""

from .codec import (
    Bitstream,
    BitstreamError,
    bitstream_stats,
    classify_fixed,
    classify_topk,
    decode_pointcloud,
    decode_voxels,
    encode_pointcloud,
    tune_rho,
)
from .metrics import RdPoint, bd_rate, d1_psnr, d2_psnr, psnr
from .pointcloud_io import PlyParseError, PointSet, VoxelSet, read_ply, save_ply
from .preprocess import ScaleConfig, assemble, partition
from .trainer import TrainConfig, gen_synthetic_dataset, train, train_ladder
from .transforms import PROFILES, ModelParameters, NetConfig

__version__ = "0.1.0"
