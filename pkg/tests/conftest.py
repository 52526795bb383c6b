import numpy as np
import pytest

from scaletune.denoiser import Denoiser, DenoiserConfig
from scaletune.diffusion import ToyDatasetSpec, gen_dataset, make_schedule
from scaletune.numerics import Param
from scaletune.qlayers import QuantConv2d, QuantLinear
from scaletune.quantizer import calibrate_minmax, quantize, quantize_model
from scaletune.training import TrainConfig, pretrain


def tiny_config(**overrides):
    """Smallest denoiser that still has every structural feature."""
    base = dict(image_size=8, base_width=8, channel_mults=(1, 2), res_blocks=1,
                temb_dim=8, temb_hidden=16)
    base.update(overrides)
    return DenoiserConfig(**base)


def make_qlinear(c_out, c_in, bits=4, seed=0, dtype=np.float32, name="lin", bias=False):
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 1.0, size=(c_out, c_in)).astype(dtype)
    qt = quantize(w, calibrate_minmax(w, bits))
    b = Param(rng.normal(size=c_out).astype(dtype), trainable=False) if bias else None
    return QuantLinear(name, qt, b), w


def make_qconv(c_out, c_in, k=3, bits=4, seed=0, dtype=np.float32, name="conv",
               stride=1, padding=1, bias=False):
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 1.0, size=(c_out, c_in, k, k)).astype(dtype)
    qt = quantize(w, calibrate_minmax(w, bits))
    b = Param(rng.normal(size=c_out).astype(dtype), trainable=False) if bias else None
    return QuantConv2d(name, qt, b, stride=stride, padding=padding), w


@pytest.fixture(scope="session")
def sched100():
    return make_schedule(100, 1e-4, 0.02)


@pytest.fixture(scope="session")
def blobs64():
    return gen_dataset(ToyDatasetSpec(family="blobs", n_samples=64, seed=1, image_size=8))


@pytest.fixture(scope="session")
def checker64():
    return gen_dataset(ToyDatasetSpec(family="checker", n_samples=64, seed=1, image_size=8))


@pytest.fixture(scope="session")
def pretrained_tiny(sched100, blobs64):
    """Tiny model trained just enough that no layer is still all-zero."""
    model = Denoiser(tiny_config(), seed=5)
    pretrain(model, blobs64, sched100,
             TrainConfig(lr=1e-3, batch_size=8, iterations=150, seed=5))
    return model


@pytest.fixture(scope="session")
def quantized_tiny(pretrained_tiny):
    return quantize_model(pretrained_tiny, bits=4, policy="interior")
