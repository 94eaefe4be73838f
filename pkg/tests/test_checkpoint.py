"""Tests for the binary checkpoint container."""

import numpy as np
import pytest
import torch
import torch.nn as nn

from sogvg.checkpoint import (
    CheckpointPayload,
    arrays_to_model,
    arrays_to_optimizer,
    load_checkpoint,
    model_to_arrays,
    optimizer_to_arrays,
    save_checkpoint,
)
from sogvg.errors import CheckpointError


def _payload(rng):
    arrays = {
        "model.weight": rng.standard_normal((3, 4)).astype(np.float32),
        "model.bias": rng.standard_normal(3).astype(np.float32),
        "optim.model.weight.step": np.asarray(17.0, dtype=np.float64),
        "counts": rng.integers(0, 100, size=5).astype(np.int64),
    }
    return CheckpointPayload(
        epoch=3,
        global_step=123,
        config={"model": {"d_m": 8}},
        meta={"image_size": 64, "vocabulary": ["<pad>", "red"]},
        rng={"data": {"state": 5}},
        arrays=arrays,
    )


class TestContainer:
    def test_round_trip_preserves_payload(self, tmp_path):
        rng = np.random.default_rng(42)
        payload = _payload(rng)
        path = tmp_path / "run.ckpt"
        save_checkpoint(path, payload)
        loaded = load_checkpoint(path)
        assert loaded.epoch == payload.epoch
        assert loaded.global_step == payload.global_step
        assert loaded.config == payload.config
        assert loaded.meta == payload.meta
        assert loaded.rng == payload.rng
        assert set(loaded.arrays) == set(payload.arrays)
        for name, arr in payload.arrays.items():
            assert loaded.arrays[name].dtype == arr.dtype
            assert loaded.arrays[name].shape == arr.shape
            np.testing.assert_array_equal(loaded.arrays[name], arr)

    def test_save_load_save_is_byte_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        payload = _payload(rng)
        first = tmp_path / "a.ckpt"
        second = tmp_path / "b.ckpt"
        save_checkpoint(first, payload)
        save_checkpoint(second, load_checkpoint(first))
        assert first.read_bytes() == second.read_bytes()

    def test_rejects_foreign_files(self, tmp_path):
        path = tmp_path / "other.bin"
        path.write_bytes(b"PNG\x00not a checkpoint at all")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "missing.ckpt")

    def test_rejects_future_version(self, tmp_path):
        rng = np.random.default_rng(1)
        path = tmp_path / "run.ckpt"
        save_checkpoint(path, _payload(rng))
        raw = bytearray(path.read_bytes())
        raw[9:13] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_rejects_truncation_everywhere(self, tmp_path):
        rng = np.random.default_rng(2)
        path = tmp_path / "run.ckpt"
        save_checkpoint(path, _payload(rng))
        raw = path.read_bytes()
        for cut in (4, 15, len(raw) // 2, len(raw) - 3):
            clipped = tmp_path / f"cut{cut}.ckpt"
            clipped.write_bytes(raw[:cut])
            with pytest.raises(CheckpointError):
                load_checkpoint(clipped)


class TestModelArrays:
    def _model(self, seed=0):
        torch.manual_seed(seed)
        return nn.Sequential(nn.Linear(4, 3), nn.ReLU(), nn.Linear(3, 2))

    def test_round_trip_restores_parameters_bitwise(self):
        source = self._model(seed=0)
        target = self._model(seed=1)
        arrays_to_model(target, model_to_arrays(source))
        for a, b in zip(source.state_dict().values(), target.state_dict().values()):
            assert torch.equal(a, b)

    def test_missing_parameter_rejected(self):
        model = self._model()
        arrays = model_to_arrays(model)
        del arrays["model.0.weight"]
        with pytest.raises(CheckpointError, match="0.weight"):
            arrays_to_model(model, arrays)

    def test_shape_mismatch_rejected(self):
        model = self._model()
        arrays = model_to_arrays(model)
        arrays["model.0.weight"] = arrays["model.0.weight"][:, :2]
        with pytest.raises(CheckpointError, match="shape"):
            arrays_to_model(model, arrays)


class TestOptimizerArrays:
    def test_round_trip_preserves_adamw_state(self):
        torch.manual_seed(3)
        model = nn.Linear(4, 2)
        optim = torch.optim.AdamW(model.parameters(), lr=1e-3)
        for _ in range(3):
            optim.zero_grad()
            model(torch.randn(5, 4)).sum().backward()
            optim.step()
        named = list(model.named_parameters())
        arrays = optimizer_to_arrays(optim, named)

        torch.manual_seed(3)
        fresh_model = nn.Linear(4, 2)
        fresh = torch.optim.AdamW(fresh_model.parameters(), lr=1e-3)
        arrays_to_optimizer(fresh, list(fresh_model.named_parameters()), arrays)
        for (_, p_old), (_, p_new) in zip(named, fresh_model.named_parameters()):
            old_state = optim.state[p_old]
            new_state = fresh.state[p_new]
            assert float(new_state["step"]) == float(old_state["step"])
            assert torch.equal(new_state["exp_avg"], old_state["exp_avg"])
            assert torch.equal(new_state["exp_avg_sq"], old_state["exp_avg_sq"])

    def test_unstepped_optimizer_produces_no_arrays(self):
        model = nn.Linear(4, 2)
        optim = torch.optim.AdamW(model.parameters())
        assert optimizer_to_arrays(optim, list(model.named_parameters())) == {}
