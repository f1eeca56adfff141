from .core import CLASS_NAMES, Dataset, RegionAnnotation, Subject, Volume3D
from .io import (
    MalformedHeaderError,
    NegativeIntensityError,
    SizeMismatchError,
    VolumeFormatError,
    load_dataset,
    load_volume,
    save_dataset,
    save_volume,
)
from .phantom import PhantomSpec, dataset_digest, generate_phantom_dataset
from .split import SplitPlan, subject_split
from .transforms import (
    ROTATION_ANGLES,
    augment,
    augment_batch,
    center_slab,
    normalize_intensity,
    resize_array,
    resize_trilinear,
)
