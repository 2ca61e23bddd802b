import pytest
import torch

from latentswitch.checkpoint import ORIENTATION, load_bundle, read_checkpoint, save_bundle, write_checkpoint
from latentswitch.errors import DataError, InputError
from latentswitch.latent import build_analytic_projector, build_learned_projector

from conftest import make_model


def _same(a: torch.Tensor, b: torch.Tensor) -> bool:
    return a.dtype == b.dtype and a.shape == b.shape and a.numpy().tobytes() == b.numpy().tobytes()


@pytest.mark.parametrize("learned", [False, True])
def test_bundle_round_trip_is_bit_exact(tmp_path, learned):
    m = make_model(seed=4)
    proj = build_learned_projector(m, seed=2) if learned else build_analytic_projector(m)
    opt = {"optim.state.0.exp_avg": torch.randn(3, 5, dtype=torch.float64), "optim.step": torch.tensor(7)}
    save_bundle(tmp_path / "ck", m, proj, extra_tensors=opt, extra_meta={"train.step": 7})
    m2, p2, tensors, meta = load_bundle(tmp_path / "ck")
    for (n, a), (_, b) in zip(m.state_dict().items(), m2.state_dict().items()):
        assert _same(a, b), n
    for (n, a), (_, b) in zip(proj.state_dict().items(), p2.state_dict().items()):
        assert _same(a, b), n
    for k, v in opt.items():
        assert _same(v, tensors[k])
    assert meta["train.step"] == 7 and p2.mode == proj.mode
    assert m2.config == m.config


def test_manifest_records_layout(tmp_path):
    write_checkpoint(tmp_path / "x", {"b": torch.ones(2, dtype=torch.float32), "a": torch.zeros(3, 4, dtype=torch.float64)},
                     {"note": "hi"})
    text = (tmp_path / "x.manifest").read_text()
    assert 'endianness = "little"' in text
    assert "orientation = " in text and "h @ W_a" in ORIENTATION
    assert "tensor.a = dtype=float64 shape=3x4 offset=0 nbytes=96" in text
    assert "tensor.b = dtype=float32 shape=2 offset=96 nbytes=8" in text
    assert (tmp_path / "x.bin").stat().st_size == 104
    # writing twice yields identical bytes
    write_checkpoint(tmp_path / "y", {"b": torch.ones(2, dtype=torch.float32), "a": torch.zeros(3, 4, dtype=torch.float64)},
                     {"note": "hi"})
    assert (tmp_path / "y.bin").read_bytes() == (tmp_path / "x.bin").read_bytes()
    assert (tmp_path / "y.manifest").read_text() == text


def test_checkpoint_errors(tmp_path):
    with pytest.raises(InputError):
        read_checkpoint(tmp_path / "missing")
    write_checkpoint(tmp_path / "t", {"a": torch.ones(4, dtype=torch.float64)})
    (tmp_path / "t.bin").write_bytes(b"\0" * 8)
    with pytest.raises(DataError, match="past the end"):
        read_checkpoint(tmp_path / "t")
    (tmp_path / "t.bin").unlink()
    with pytest.raises(DataError):
        read_checkpoint(tmp_path / "t")
    (tmp_path / "u.manifest").write_text("garbage\n")
    (tmp_path / "u.bin").write_bytes(b"")
    with pytest.raises(DataError):
        read_checkpoint(tmp_path / "u")
    with pytest.raises(InputError):
        write_checkpoint(tmp_path / "v", {"a": torch.ones(2, dtype=torch.int8)})


def test_shape_mismatch_is_data_error(tmp_path):
    m = make_model()
    save_bundle(tmp_path / "ck", m)
    tensors, meta = read_checkpoint(tmp_path / "ck")
    tensors["model.input_embedding"] = tensors["model.input_embedding"][:, :8].contiguous()
    write_checkpoint(tmp_path / "bad", tensors, {k: v for k, v in meta.items() if k not in
                                                 ("format", "version", "endianness", "orientation")})
    with pytest.raises(DataError):
        load_bundle(tmp_path / "bad")
