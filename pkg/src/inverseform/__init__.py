"""Boundary-aware segmentation loss from an inverse-transformation network, on numpy."""

__version__ = "0.1.0"

from .boundary import BoundaryMap, Kind, sobel_boundary, split_tiles
from .distance import DistanceConfig, DistanceMode, distance, euclidean_distance, geodesic_distance, so3_project
from .errors import (ContractError, DegenerateSpectrumError, DimensionError, DivergenceError, EmptyDatasetError,
                     FormatError, InverseFormError, NumericError, SingularityError)
from .homography import HomographyParams, Mode, TransformRanges, sample_transform, stn_warp
from .itn import ItnModel, freeze, init_itn, itn_forward, train_itn
from .loss import LossWeights, balanced_boundary_xe, inverseform_loss, pixel_cross_entropy, total_loss
from .metrics import ConfusionMatrix, mba, miou, pixel_accuracy
