"""Category-level point-cloud retrieval and symmetry-aided rigid registration."""

from symreg.errors import DegeneracyError, FormatError, InputError, SymregError
from symreg.geometry import (
    Correspondence,
    PointCloud,
    Pose,
    SimilarityMatrix,
    apply_pose,
    chamfer,
    matched_point_distance,
    normalize_cloud,
    positive_negative_sets,
    scd,
    similarity_matrix,
    to_ncc,
)

__version__ = "0.1.0"
