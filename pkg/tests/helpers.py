"""Shared tiny configurations for fast tests."""

from feainf.encoder import ConvSpec, EncoderConfig
from feainf.model import init_model
from feainf.synthdata import SynthConfig
from feainf.training import TrainConfig

TINY_ENCODER = EncoderConfig(
    height=16, width=16, channels=1,
    layers=(ConvSpec(3, 2, 1, 4), ConvSpec(3, 2, 1, 6)),
    feature_height=4, feature_width=4, feature_channels=5,
)

TINY_SYNTH = SynthConfig(height=16, width=16, n_train=24, n_test=12, radius_min=2.0,
                         radius_max=3.0, seed=11)

TINY_TRAIN = TrainConfig(epochs=12, batch_size=8, projection_start=6, projection_period=4,
                         num_pos=3, num_neg=2, lr_encoder=1e-3, lr_prototypes=1e-3,
                         lr_head=1e-3, seed=6)


def tiny_model(seed=0, alpha=0.1, num_pos=3, num_neg=2):
    return init_model(TINY_ENCODER, num_pos=num_pos, num_neg=num_neg, alpha=alpha, seed=seed)
