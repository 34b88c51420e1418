import numpy as np
import numpy.testing as npt
import pytest

from interpconv.checkpoint import (
    load_checkpoint,
    read_container,
    save_checkpoint,
    save_tensors,
    write_container,
)
from interpconv.errors import DataError
from interpconv.nn.network import NetworkConfig, build_network, conv, fc, interp_conv, maxpool, relu
from interpconv.nn.train import TrainConfig, fit


def _small_net_config():
    layers = (
        conv(4, 3, 1, 1), relu(), maxpool(2),
        interp_conv(6), maxpool(2),
        interp_conv(6),
        fc(3),
    )
    return NetworkConfig((1, 16, 16), layers, loss="softmax", num_classes=3)


def test_container_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(4,)), "s": np.array(2.5)}
    write_container(tmp_path / "c.icnn", {"hello": 1}, tensors, {"x": [1, 2]})
    cfg, back, stats = read_container(tmp_path / "c.icnn")
    assert cfg == {"hello": 1}
    assert stats == {"x": [1, 2]}
    for k, v in tensors.items():
        npt.assert_array_equal(back[k], v)


def test_container_bad_magic_and_truncation(tmp_path):
    path = tmp_path / "c.icnn"
    write_container(path, {}, {"a": np.zeros(3)}, {})
    raw = path.read_bytes()
    (tmp_path / "bad.icnn").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(DataError):
        read_container(tmp_path / "bad.icnn")
    (tmp_path / "cut.icnn").write_bytes(raw[:-10])
    with pytest.raises(DataError):
        read_container(tmp_path / "cut.icnn")
    with pytest.raises(DataError):
        read_container(tmp_path / "missing.icnn")


def test_tensor_archive(tmp_path):
    save_tensors(tmp_path / "t.icnn", {"templates": np.eye(3)}, note="demo")
    cfg, tensors, stats = read_container(tmp_path / "t.icnn")
    assert cfg["kind"] == "tensor-archive"
    npt.assert_array_equal(tensors["templates"], np.eye(3))


def test_checkpoint_round_trip_after_training(tmp_path):
    rng = np.random.default_rng(1)
    images = rng.uniform(0, 1, (24, 16, 16, 1))
    labels = rng.integers(0, 3, size=24)
    cfg = TrainConfig(epochs=2, seed=5, lambda_coeff=5e-6, batch_size=8, log_subset=0)
    network, _ = fit(_small_net_config(), images, labels, cfg)
    path = tmp_path / "net.icnn"
    save_checkpoint(path, {"run": "test"}, network)
    loaded, echo = load_checkpoint(path)
    assert echo["run"] == "test"
    for p, q in zip(network.parameters(), loaded.parameters()):
        npt.assert_array_equal(p, q)
    for la, lb in zip(network.interp_layers, loaded.interp_layers):
        assert la.active == lb.active
        assert la.gain == lb.gain
        for sa, sb in zip(la.states, lb.states):
            npt.assert_array_equal(sa.z_estimates, sb.z_estimates)
            assert sa.mean_px == sb.mean_px
            assert sa.lam == sb.lam
            assert sa.assigned_category == sb.assigned_category
            assert sa.n_ref == sb.n_ref
    # identical inference end to end
    probe = rng.uniform(0, 1, (4, 16, 16, 1))
    npt.assert_array_equal(network.logits(probe), loaded.logits(probe))
    npt.assert_array_equal(network.top_feature_maps(probe), loaded.top_feature_maps(probe))


def test_checkpoint_save_is_deterministic(tmp_path):
    rng = np.random.default_rng(2)
    images = rng.uniform(0, 1, (16, 16, 16, 1))
    labels = rng.integers(0, 3, size=16)
    cfg = TrainConfig(epochs=1, seed=3, lambda_coeff=5e-6, batch_size=8, log_subset=0)
    network, _ = fit(_small_net_config(), images, labels, cfg)
    save_checkpoint(tmp_path / "a.icnn", {"k": 1}, network)
    save_checkpoint(tmp_path / "b.icnn", {"k": 1}, network)
    assert (tmp_path / "a.icnn").read_bytes() == (tmp_path / "b.icnn").read_bytes()
