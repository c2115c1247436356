import json

import numpy as np
import pytest
import torch

from aptbench.config import ModelConfig, TrainConfig
from aptbench.data import Dataset, ingest
from aptbench.evaluate import feature_stats, fid
from aptbench.models import ImageClassifier, discriminate, load_checkpoint, perceptual_embed
from aptbench.pretrain import accuracy, sample_images, train_classifier, train_gan, train_perceptual

slow = pytest.mark.slow


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    ingest("digits16", root)
    return Dataset("digits16", root)


def test_classifier_training_is_deterministic(data, tmp_path):
    cfg = TrainConfig(epochs=1)
    a = train_classifier(data, ModelConfig(), cfg, "mlp", tmp_path / "a.jsonl")
    b = train_classifier(data, ModelConfig(), cfg, "mlp")
    for k, v in a["params"].items():
        assert torch.equal(v, b["params"][k])
    assert a["meta"]["final_loss"] == b["meta"]["final_loss"]
    assert a["meta"]["seed"] == 0
    log = [json.loads(l) for l in (tmp_path / "a.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in log] == [0]


def test_gan_final_epoch_loss_is_deterministic(data, tmp_path):
    aux = ImageClassifier(ModelConfig(), "perceptual")
    cfg = TrainConfig(epochs=1, aux_class_weight=0.3)
    a = train_gan(data, ModelConfig(), cfg, aux, tmp_path / "gan.jsonl")
    b = train_gan(data, ModelConfig(), cfg, aux)
    assert a["meta"]["final_g_loss"] == b["meta"]["final_g_loss"]
    assert a["meta"]["final_d_loss"] == b["meta"]["final_d_loss"]
    assert np.isfinite(a["meta"]["final_g_loss"])
    assert (tmp_path / "gan.jsonl").read_text().count("\n") == 1


def test_unknown_architecture_rejected(data):
    with pytest.raises(ValueError):
        train_classifier(data, ModelConfig(), TrainConfig(epochs=0), "resnet")


def test_perceptual_metadata_declares_taps(data):
    b = train_perceptual(data, ModelConfig(), TrainConfig(epochs=0))
    net = ImageClassifier(ModelConfig(), "perceptual")
    taps = perceptual_embed(net, torch.zeros(1, 1, 16, 16))
    assert b["meta"]["taps"] == [list(t.shape[1:]) for t in taps]


# ---------------------------------------------------------------------------
# oracles on the pretrained fixtures


@slow
def test_conv_classifier_above_ninety_percent(trained_home):
    meta = load_checkpoint(trained_home.checkpoint("conv"))["meta"]
    assert meta["test_accuracy"] > 0.9


@slow
@pytest.mark.parametrize("name", ["conv", "mlp", "oracle", "perceptual"])
def test_recorded_accuracy_matches_reevaluation(trained_home, name):
    data = Dataset("digits16", trained_home.data_root)
    h = trained_home.load_classifier(name)
    x, y = data.split("test").tensors()
    assert accuracy(h.net, x, y) == h.meta["test_accuracy"]


@slow
def test_discriminator_prefers_real_images(trained_home):
    fx = trained_home.fixtures([])
    data = Dataset("digits16", trained_home.data_root)
    real, _ = data.split("val").tensors()
    noise = torch.rand(64, 1, 16, 16, generator=torch.Generator().manual_seed(0)) * 2 - 1
    with torch.no_grad():
        r = torch.stack(discriminate(fx.D, real[:64])).mean()
        n = torch.stack(discriminate(fx.D, noise)).mean()
    assert r > n


@slow
def test_generator_is_class_conditional(trained_home):
    fx = trained_home.fixtures(["oracle"])
    classes = torch.arange(256) % 10
    x = sample_images(fx.G, classes, seed=1)
    with torch.no_grad():
        pred = fx.classifiers["oracle"].net(x).argmax(-1)
    assert (pred == classes).float().mean() >= 0.6


@slow
def test_generated_samples_closer_to_data_than_noise(trained_home):
    fx = trained_home.fixtures([])
    data = Dataset("digits16", trained_home.data_root)
    train, _ = data.split("train").tensors()
    ref = feature_stats(train, fx.pnet)
    gen = torch.cat([sample_images(fx.G, torch.arange(1000) % 10, seed=s) for s in range(5)])
    noise = torch.rand(5000, 1, 16, 16, generator=torch.Generator().manual_seed(0)) * 2 - 1
    assert fid(ref, feature_stats(gen, fx.pnet)) < fid(ref, feature_stats(noise, fx.pnet))


@slow
def test_perceptual_features_distinguish_images(trained_home):
    fx = trained_home.fixtures([])
    data = Dataset("digits16", trained_home.data_root)
    x, _ = data.split("val").tensors()
    with torch.no_grad():
        a, b = perceptual_embed(fx.pnet, x[:1]), perceptual_embed(fx.pnet, x[1:2])
    assert all(not torch.equal(u, v) for u, v in zip(a, b))
