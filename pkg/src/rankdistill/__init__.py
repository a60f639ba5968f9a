"""Data-efficient ranking distillation in embedding space.

A compact student head is trained to reproduce the neighbourhood ranking of
a black-box teacher from a small set of samples. Batches are augmented by
mixing global representations, labels come from thresholded teacher
similarities, and the student minimizes a histogram-quantized Average
Precision loss with analytic gradients.
"""
from .ap_loss import APLossConfig, APLossResult, ap_loss_backward, ap_loss_forward, quantized_ap, soft_bin_assignment
from .config import RunConfig
from .data_io import TeacherQueryCounter, WorldSpec, generate_world, read_embedding_file, write_embedding_file
from .embed import EmbeddingMatrix, gem_pool, l2_normalize, l2_normalize_backward, similarity_matrix
from .evaluation import apply_whitening, fit_whitening, mean_average_precision, mean_precision_at_k
from .labeling import PositiveSets, build_label_matrix, mixup_labeling, similarity_labeling
from .mixup import MixRecord, mix_batch, sample_lambda, sample_partners
from .trainer import Adam, StudentHead, batch_step, lr_at, train, weight_average

__version__ = "0.1.0"
