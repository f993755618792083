import numpy as np
import pytest

from app import sharing
from app import tensor as T
from app.geometry import GridSpec, Pose2D
from app.scenario import PseudoImage
from app.sharing import BackboneLite, Codec, SharedFeature
from app.tensor import Tensor
from app.util import ConfigError, UsageError
from tests.conftest import assert_gradients_match

ORIGIN = Pose2D(0, 0, 0)


@pytest.fixture
def square_grid():
    return GridSpec(-8.0, 8.0, -8.0, 8.0, 1.0)


def shared(feature, pose=ORIGIN, time=500.0, velocity=(0.0, 0.0), agent_id=2):
    return SharedFeature(agent_id, Tensor(feature), pose, time, "V", velocity)


#
# Backbone and codec
#


def test_backbone_interior_is_constant_on_constant_input(square_grid, rng):
    backbone = BackboneLite(square_grid, 3, 8, rng).eval()
    image = PseudoImage(Tensor(np.ones((16, 16, 3))), square_grid)
    out = sharing.extract_backbone_lite(backbone, image).data
    assert out.shape == (16, 16, 8)
    interior = out[3:-3, 3:-3]
    np.testing.assert_allclose(interior, np.broadcast_to(interior[0, 0], interior.shape), atol=1e-12)


def test_backbone_weights_are_shared(square_grid, rng):
    backbone = BackboneLite(square_grid, 3, 8, rng).eval()
    image = rng.uniform(size=(16, 16, 3))
    batch = backbone(Tensor(np.stack([image, image]))).data
    np.testing.assert_allclose(batch[0], batch[1], atol=1e-12)


def test_backbone_rejects_other_grid(square_grid, rng):
    backbone = BackboneLite(square_grid, 3, 8, rng)
    other = GridSpec(-4.0, 4.0, -4.0, 4.0, 1.0)
    with pytest.raises(ConfigError):
        sharing.extract_backbone_lite(backbone, PseudoImage(Tensor(np.zeros((8, 8, 3))), other))
    with pytest.raises(ConfigError):
        backbone(Tensor(np.zeros((1, 16, 16, 2))))


def test_backbone_gradient(rng):
    grid = GridSpec(-3.0, 3.0, -3.0, 3.0, 1.0)
    backbone = BackboneLite(grid, 3, 4, rng)
    x = Tensor(rng.uniform(size=(1, 6, 6, 3)), requires_grad=True)
    weights = rng.normal(size=(1, 6, 6, 4))
    assert_gradients_match(
        lambda: T.sum_(T.mul(backbone(x), weights)),
        [x, *backbone.parameters()],
        rtol=1e-4,
        atol=1e-7,
        samples=12,
        rng=rng,
    )


def test_codec_channels(rng):
    codec = Codec(32, 4, rng)
    assert codec.compressed_channels == 8
    f = Tensor(rng.normal(size=(2, 5, 5, 32)))
    compressed = codec.compress(f)
    assert compressed.shape == (2, 5, 5, 8)
    assert codec.decompress(compressed).shape == (2, 5, 5, 32)


def test_codec_rejects_uneven_ratio(rng):
    with pytest.raises(ConfigError):
        Codec(32, 5, rng)


def test_identity_codec_round_trip_is_exact(rng):
    codec = Codec(6, 1, rng)
    codec.identity_()
    f = Tensor(rng.normal(size=(1, 4, 7, 6)))
    assert np.array_equal(codec.decompress(codec.compress(f)).data, f.data)


def test_payload_and_link_budget(desk_config):
    assert sharing.payload_bytes(desk_config.grid, 64, 8) == 8 * 48 * 96 * 8
    rows = sharing.link_budget_rows([1, 3, 2], [500.0, 300.0, 400.0], 500.0, 1024)
    assert rows == [[2, 1024, 100.0], [3, 1024, 200.0]]


#
# Transform, crop and motion compensation
#


def test_gamma_identity(square_grid, rng):
    feature = rng.normal(size=(16, 16, 4))
    out, validity = sharing.gamma(shared(feature), ORIGIN, 500.0, square_grid)
    assert np.array_equal(out.data, feature)
    assert np.all(validity == 1.0)


def test_gamma_one_cell_shift(square_grid, rng):
    feature = rng.normal(size=(16, 16, 2))
    out, validity = sharing.gamma(shared(feature, pose=Pose2D(1.0, 0, 0)), ORIGIN, 500.0, square_grid)
    assert np.array_equal(out.data[:, 1:], feature[:, :-1])
    assert np.all(out.data[:, 0] == 0.0)
    assert np.all(validity[:, 0] == 0.0)


def test_gamma_zeroes_every_invalid_cell(square_grid, rng):
    feature = rng.normal(size=(16, 16, 3)) + 5.0
    out, validity = sharing.gamma(shared(feature, pose=Pose2D(4.3, -2.2, 0.6)), ORIGIN, 500.0, square_grid)
    assert (validity == 0).any()
    assert np.all(out.data[validity == 0] == 0.0)


def test_gamma_crop(square_grid, rng):
    feature = rng.normal(size=(16, 16, 2))
    out, validity = sharing.gamma(shared(feature), ORIGIN, 500.0, square_grid, detection_range=(-2, 2, -2, 2))
    mask = sharing.crop_mask(square_grid, (-2, 2, -2, 2))
    assert mask.sum() == 16
    assert np.all(out.data[mask == 0] == 0.0)
    assert np.array_equal(out.data[mask == 1], feature[mask == 1])
    assert np.array_equal(validity, mask)


class TestMotionCompensation:
    @pytest.fixture
    def grid(self):
        return GridSpec(-8.0, 8.0, -4.0, 4.0, 0.8)

    @pytest.fixture
    def ramp(self, grid):
        # feature value equals the column index
        return np.broadcast_to(np.arange(grid.W, dtype=np.float64)[None, :, None], (grid.H, grid.W, 1)).copy()

    def test_shift_follows_sender_velocity(self, grid, ramp):
        sender = shared(ramp, time=300.0, velocity=(10.0, 0.0))
        out, validity = sharing.gamma(sender, ORIGIN, 500.0, grid)
        columns = np.arange(3, grid.W)
        np.testing.assert_allclose(out.data[:, 3:, 0], np.broadcast_to(columns - 2.5, (grid.H, len(columns))), atol=1e-9)
        assert np.all(validity[:, 0] == 0.0)
        assert np.all(out.data[:, 0] == 0.0)

    def test_disabled_leaves_feature_in_place(self, grid, ramp):
        sender = shared(ramp, time=300.0, velocity=(10.0, 0.0))
        out, _ = sharing.gamma(sender, ORIGIN, 500.0, grid, stcm=False)
        assert np.array_equal(out.data, ramp)

    def test_no_delay_or_no_motion_is_a_no_op(self, grid, ramp):
        for sender in (shared(ramp, time=500.0, velocity=(10.0, 0.0)), shared(ramp, time=300.0)):
            out, _ = sharing.gamma(sender, ORIGIN, 500.0, grid)
            assert np.array_equal(out.data, ramp)


#
# Assembly
#


def test_assemble_orders_ego_first_then_by_id():
    features = [(3, Tensor(np.full((2, 2, 1), 3.0)), np.ones((2, 2))),
                (1, Tensor(np.full((2, 2, 1), 1.0)), np.ones((2, 2))),
                (2, Tensor(np.full((2, 2, 1), 2.0)), np.ones((2, 2)))]  # fmt: skip
    fused = sharing.assemble(features)
    assert fused.agent_ids == [1, 2, 3]
    assert fused.tensor.data[:, 0, 0, 0].tolist() == [1.0, 2.0, 3.0]
    reordered = sharing.assemble(features[::-1])
    assert np.array_equal(reordered.tensor.data, fused.tensor.data)


def test_assemble_pads_to_max_agents():
    features = [(1, Tensor(np.ones((2, 3, 4))), np.ones((2, 3))), (2, Tensor(np.ones((2, 3, 4))), np.ones((2, 3)))]
    fused = sharing.assemble(features, max_agents=4)
    assert fused.agents == 4
    assert fused.agent_ids == [1, 2, 0, 0]
    assert not fused.tensor.data[2:].any()
    assert not fused.validity[2:].any()


def test_assemble_errors():
    one = (Tensor(np.ones((2, 2, 1))), np.ones((2, 2)))
    with pytest.raises(UsageError):
        sharing.assemble([])
    with pytest.raises(UsageError):
        sharing.assemble([(2, *one), (3, *one)])
    with pytest.raises(UsageError):
        sharing.assemble([(1, *one), (2, *one), (3, *one)], max_agents=2)
