"""Implicit signed-distance representation of elastically deformable tools
conditioned on contact locations and reaction forces."""

from .errors import (ConfigError, DatasetError, EmptySurfaceError, FlexsdfError,
                     InvalidInputError, InvalidSpecError, InvalidStateError,
                     NumericalError, RegimeError, ShapeError)
from .geometry import (PointCloud, SdfSampleSet, Transform, TriangleMesh,
                       normalize_cloud, sample_sdf, subsample)
from .datagen import (BoundaryCondition, ContactObservation, DeformationSample,
                      ToolSpec, build_nominal, deform, generate_dataset, load_dataset)
from .fieldnet import FieldModel, ModelConfig
from .training import (LossWeights, TrainConfig, TrainState, chamfer, clamp,
                       pretrain_nominal, train_deformed)
from .inference import (InferenceResult, PartialObservation, infer_deformation,
                        interpolate_codes, reconstruct_from_code)
from .reconstruct import (CrossSection, FieldGrid, correspondences,
                          export_cross_section, marching_cubes)
from .metrics import chamfer_distance, eval_model, l1_sdf_error

__version__ = "0.1.0"
