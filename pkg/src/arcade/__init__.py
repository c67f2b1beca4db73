"""Adversarially regularized convolutional autoencoder for flow anomaly detection."""
from .arcd import SampleSet, read_arcd, write_arcd
from .detector import anomaly_score, anomaly_scores, evaluate, fit_threshold, split_dataset
from .ingest import IngestConfig, anonymize_and_trim, flush, ingest_packet, iter_samples, preprocess_capture
from .losses import SSIMConfig, critic_loss, generator_loss, gradient_penalty, l2_loss, mssim, ssim_patch
from .model import Arcade, ModelConfig, build_model, parameter_counts
from .pcap import FlowKey, PacketRecord, parse_capture
from .trainer import TrainConfig, Trainer, latent_dim_from_pca, lr_schedule, train

__version__ = "0.1.0"
