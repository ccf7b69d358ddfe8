"""Audio-driven 3D talking-face generation with an x0-parameterised diffusion model."""
from .conditioning import AudioFeatureSequence, MaskPlan, guided_predict, resample_audio
from .denoiser import Denoiser, DenoiserConfig, init_params, make_config
from .diffusion import DiffusionSchedule, ddpm_step, make_schedule, q_sample
from .mesh_repr import FaceMeshSequence, FaceRepresentation, RigSpec, decompose, render
from .metrics import EvalReport, lip_vertex_error, multimodality, nldd
from .sampler import ReferenceSet, sample, sample_batch
from .sync_expert import SyncExpert, sync_distance, train_sync_expert

__version__ = "0.1.0"
