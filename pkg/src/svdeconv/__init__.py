"""Semi-blind spatially-variant deconvolution for 2D microscopy images.

Pipeline: synthesize aberrated kernels from Zernike coefficients (optics),
generate degraded training data (datagen), regress local blur parameters
from patches (estimator), assemble a PSF map over the image (psfmap), and
restore with TV-regularized spatially-variant Richardson-Lucy (deconv).
"""

__version__ = "0.1.0"

from .bench import BenchReport, make_grid_image, quadrant_degrade, r_squared, run_grid_benchmark
from .datagen import DatasetConfig, TrainingPair, generate_dataset, synthetic_cells
from .deconv import MaskSet, build_masks, sv_convolve, tv_gradient_term, tv_rl_deconvolve
from .errors import (
    BackendError,
    ContractError,
    DomainError,
    ExhaustionError,
    FileFormatError,
    GeometryError,
    ModelLoadError,
    NumericalFailureError,
    SvDeconvError,
    UndefinedMetricError,
    UnsupportedAberrationError,
)
from .estimator import (
    DictionaryEstimator,
    OnnxPatchEstimator,
    PatchEstimate,
    PatchEstimator,
    SpectralDictionary,
    build_dictionary,
    estimate_spectral,
    load_external_model,
    reference_patch,
)
from .imageops import Metrics, add_poisson_noise, compute_metrics, fft_convolve, normalize_patch, snr, ssim
from .optics import PupilGrid, pupil_function, synthesize_psf, zernike_eval
from .psfmap import PsfMap, estimate_map, load_map_json, realize_kernels, save_map_json, smooth_map
