import numpy as np
import pytest

from splitveil.engine import LayerSpec, ShapeError, Tensor
from splitveil.models import (
    ParamFileError,
    SplitModelSpec,
    build_decoder,
    build_split_model,
    frequency_model_spec,
    full_forward,
    load_params,
    pixel_model_spec,
    reference_tiny_spec,
    save_params,
)


def test_reference_tiny_spec_shapes():
    spec = reference_tiny_spec(54, 10)
    assert spec.input_shape == (162, 4, 4)
    assert spec.interface_shape() == (32, 4, 4)
    assert spec.validate() == (10,)
    bottom, top = build_split_model(spec, seed=0)
    x = Tensor(np.random.default_rng(0).normal(size=(2, 162, 4, 4)))
    assert top(bottom(x)).shape == (2, 10)


def test_boundary_split_top_is_single_linear():
    base = reference_tiny_spec(10, 5)
    spec = SplitModelSpec(base.layers, len(base.layers) - 1, base.input_shape)
    bottom, top = build_split_model(spec, seed=1)
    assert [l.kind for l in top.layers] == ["linear"]
    x = Tensor(np.random.default_rng(1).normal(size=(3, 30, 4, 4)))
    assert top(bottom(x)).shape == (3, 5)


@pytest.mark.parametrize("split", [0, 6])
def test_split_out_of_range(split):
    with pytest.raises(ValueError):
        SplitModelSpec(reference_tiny_spec(10, 5).layers, split, (30, 4, 4))


def test_mismatched_interface_rejected():
    layers = (LayerSpec.conv(3, 8), LayerSpec.conv(16, 4), LayerSpec.fc(4 * 8 * 8, 2))
    with pytest.raises(ShapeError, match="does not fit the top model"):
        SplitModelSpec(layers, 1, (3, 8, 8)).validate()


@pytest.mark.parametrize("spec", [reference_tiny_spec(54, 10), frequency_model_spec(41, 4),
                                  pixel_model_spec(4)])
def test_split_equals_unsplit_exactly(spec):
    bottom, top = build_split_model(spec, seed=3)
    x = Tensor(np.random.default_rng(3).normal(size=(4,) + spec.input_shape))
    assert np.array_equal(top(bottom(x)).data, full_forward(spec, bottom, top, x).data)


def test_init_deterministic_and_seed_sensitive():
    spec = frequency_model_spec(18, 4)
    a, _ = build_split_model(spec, seed=5)
    b, _ = build_split_model(spec, seed=5)
    c, _ = build_split_model(spec, seed=6)
    assert a.fingerprint() == b.fingerprint() != c.fingerprint()


def test_spec_dict_round_trip():
    spec = pixel_model_spec(4)
    assert SplitModelSpec.from_dict(spec.to_dict()) == spec


def test_param_file_round_trip_bit_exact(tmp_path):
    bottom, top = build_split_model(reference_tiny_spec(54, 10), seed=2)
    params = {**bottom.parameters(), **top.parameters()}
    save_params(params, tmp_path / "p.svpm")
    back = load_params(tmp_path / "p.svpm")
    assert set(back) == set(params)
    for k, v in params.items():
        assert back[k].tobytes() == v.data.tobytes()


def test_empty_param_set_is_valid(tmp_path):
    save_params({}, tmp_path / "e.svpm")
    assert load_params(tmp_path / "e.svpm") == {}


def test_truncated_file_reports_offset(tmp_path):
    save_params({"w": np.arange(6.0).reshape(2, 3)}, tmp_path / "t.svpm")
    raw = (tmp_path / "t.svpm").read_bytes()
    (tmp_path / "t.svpm").write_bytes(raw[:-5])
    with pytest.raises(ParamFileError, match="offset"):
        load_params(tmp_path / "t.svpm")


def test_bad_magic_version_trailing_and_shape(tmp_path):
    p = tmp_path / "x.svpm"
    save_params({"w": np.ones(3)}, p)
    raw = p.read_bytes()
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ParamFileError, match="magic"):
        load_params(p)
    p.write_bytes(raw[:4] + b"\x09" + raw[5:])
    with pytest.raises(ParamFileError, match="version"):
        load_params(p)
    p.write_bytes(raw + b"\x00")
    with pytest.raises(ParamFileError, match="trailing"):
        load_params(p)
    p.write_bytes(raw)
    with pytest.raises(ParamFileError, match="shape"):
        load_params(p, expected={"w": (4,)})


def test_load_state_rejects_wrong_names_and_shapes():
    bottom, _ = build_split_model(frequency_model_spec(18, 4), seed=0)
    with pytest.raises(ParamFileError):
        bottom.load_state({"0.weight": np.zeros(1)})
    state = {k: np.zeros(v.shape) for k, v in bottom.parameters().items()}
    state["0.bias"] = np.zeros(3)
    with pytest.raises(ParamFileError):
        bottom.load_state(state)


@pytest.mark.parametrize("z_shape,image", [((192, 2, 2), (3, 16, 16)), ((16, 16, 16), (3, 16, 16)),
                                           ((32, 4, 4), (3, 32, 32))])
def test_decoder_output_shape_and_range(z_shape, image):
    dec = build_decoder(z_shape, image, seed=0, width=32)
    out = dec(Tensor(np.random.default_rng(0).normal(size=(2,) + z_shape))).data
    assert out.shape == (2,) + image
    assert np.all(np.abs(out) <= 1.0)


def test_decoder_rejects_non_integer_factor():
    with pytest.raises(ShapeError):
        build_decoder((8, 3, 3), (3, 16, 16))
    with pytest.raises(ShapeError):
        build_decoder((8, 2, 4), (3, 16, 16))


def test_affine_flag():
    assert build_split_model(frequency_model_spec(54, 4))[0].is_affine
    assert not build_split_model(reference_tiny_spec(54, 4))[0].is_affine
