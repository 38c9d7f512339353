"""Confidence-propagating normalized convolution networks for sparse depth completion."""

from nconv.tensor import (
    concat_channels,
    correlate2d,
    seeded_rng,
    upsample_nearest,
)
from nconv.layer import (
    NConvLayer,
    conf_oracle,
    gamma,
    gamma_prime,
    nc_oracle,
    nconv_backward,
    nconv_forward,
)
from nconv.network import (
    Model,
    ModelSpec,
    build_model,
    conf_maxpool,
    conf_unpool_upsample,
    count_params,
    model_backward,
    model_forward,
)
from nconv.training import (
    AdamState,
    TrainConfig,
    adam_step,
    conf_loss,
    gradcheck,
    huber,
    train,
)
from nconv.data import (
    MetricsReport,
    Sample,
    evaluate,
    gen_synthetic,
    load_depth_png,
    nn_fill,
    save_conf_png,
    save_depth_png,
)

__version__ = "0.1.0"
