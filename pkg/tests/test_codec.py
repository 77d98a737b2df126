"""Codec: round trips, skip agreement, container rules, progressive modes."""

import numpy as np
import pytest
from helpers import perturb_model

import flowcodec.codec as C
from flowcodec.codec import (
    decode_image,
    decode_latents,
    encode_image,
    inspect_bitstream,
    pad_to_multiple,
    truncate_bitstream,
)
from flowcodec.entropy import QuantSpec, logistic_bin_prob, mean_symbol, skip_boundary_sigma
from flowcodec.errors import FormatError, ModelMismatchError
from flowcodec.flow import FlowConfig, FlowModel
from flowcodec.quantize import round_to_grid
from flowcodec.rangecoder import RangeDecoder, RangeEncoder
from flowcodec.tensor import Tensor, no_grad


@pytest.fixture(scope="module")
def model():
    m = FlowModel(FlowConfig(in_channels=3, steps=2, blocks=1, hidden=16, seed=11))
    perturb_model(m, np.random.default_rng(90), scale=0.01)
    return m


@pytest.fixture(scope="module")
def image():
    rng = np.random.default_rng(91)
    yy, xx = np.mgrid[0:32, 0:32]
    base = 96 + 64 * np.sin(yy / 5.0) + 48 * np.cos(xx / 7.0)
    img = np.stack([base, np.roll(base, 3, axis=1), base.T]) + rng.normal(0, 4, (3, 32, 32))
    return np.clip(img, 0, 255)


def spec_for(model, step=1.0):
    return QuantSpec.uniform(step, model.base_channels)


class TestPadding:
    def test_multiple_preserved(self):
        img = np.arange(3 * 8 * 8, dtype=np.float64).reshape(3, 8, 8)
        assert pad_to_multiple(img, 8) is img

    def test_pads_to_next_multiple(self):
        img = np.ones((3, 9, 14))
        out = pad_to_multiple(img, 8)
        assert out.shape == (3, 16, 16)

    def test_tiny_image(self):
        img = np.random.default_rng(92).normal(size=(1, 2, 3))
        out = pad_to_multiple(img, 8)
        assert out.shape == (1, 8, 8)
        assert np.array_equal(out[:, :2, :3], img)


class TestRoundTrip:
    def test_latents_bitwise_roundtrip(self, model, image):
        """Decoded latents equal the encoder's effective latents exactly."""
        spec = spec_for(model, 1.0)
        blob = encode_image(model, image, spec)
        latents, header = decode_latents(model, blob)

        padded = pad_to_multiple(image, 8)
        with no_grad():
            zs, _ = model.forward(Tensor(padded[None].astype(np.float64)))
        z0_expected = round_to_grid(zs[2].data, spec.delta0[None, :, None, None])
        assert np.array_equal(latents.z0, z0_expected)

        # z1: coded elements match the grid, skipped ones match the mean symbol
        mu1, sig1 = C._conditionals(model, 1, [None, None, z0_expected])
        skip1 = C._skip_mask(mu1, sig1, spec.delta1, header.p_thresh)
        z1_expected = np.where(skip1, mean_symbol(mu1, spec.delta1),
                               round_to_grid(zs[1].data, spec.delta1))
        assert np.array_equal(latents.z1, z1_expected)

        mu2, sig2 = C._conditionals(model, 0, [None, z1_expected, z0_expected])
        skip2 = C._skip_mask(mu2, sig2, spec.delta2, header.p_thresh)
        z2_expected = np.where(skip2, mean_symbol(mu2, spec.delta2),
                               round_to_grid(zs[0].data, spec.delta2))
        assert np.array_equal(latents.z2, z2_expected)

    def test_decode_deterministic(self, model, image):
        blob = encode_image(model, image, spec_for(model, 0.5))
        a = decode_image(model, blob)
        b = decode_image(model, blob)
        assert np.array_equal(a, b)

    def test_extents_restored(self, model):
        rng = np.random.default_rng(93)
        img = np.clip(rng.normal(128, 40, size=(3, 21, 29)), 0, 255)
        blob = encode_image(model, img, spec_for(model, 1.0))
        out = decode_image(model, blob)
        assert out.shape == img.shape

    def test_reencode_idempotent_bytes(self, model, image):
        """Compressing the decode reproduces the identical bitstream."""
        spec = spec_for(model, 0.5)
        blob1 = encode_image(model, image, spec)
        x1 = decode_image(model, blob1)
        blob2 = encode_image(model, x1, spec)
        assert blob2 == blob1
        x2 = decode_image(model, blob2)
        assert np.array_equal(x1, x2)

    def test_finer_steps_improve_quality_and_size(self, model, image):
        # p_thresh 1 codes every element, isolating pure grid error; mean
        # substitution accuracy is a trained-model property
        coarse = encode_image(model, image, spec_for(model, 2.0), p_thresh=1.0)
        fine = encode_image(model, image, spec_for(model, 0.25), p_thresh=1.0)
        assert len(fine) > len(coarse)
        err_coarse = np.max(np.abs(decode_image(model, coarse) - image))
        err_fine = np.max(np.abs(decode_image(model, fine) - image))
        assert err_fine < err_coarse


class TestSkipDecisions:
    def test_all_skipped_when_sigma_below_boundary(self, model, image):
        """Huge steps put every conditional below the skip boundary (the
        scale clamp caps sigma at e^7 < delta/(2 ln 19)): the conditional
        payloads are nothing but the coder flush."""
        spec = QuantSpec(1e4, 1e4, np.full(model.base_channels, 1.0))
        blob = encode_image(model, image, spec)
        info = inspect_bitstream(blob)
        assert info["section_bytes"]["z1"] == 5  # flush-only stream
        assert info["section_bytes"]["z2a"] == 5
        assert info["section_bytes"]["z2b"] == 5
        decode_image(model, blob)  # still decodable

    def test_p_thresh_one_codes_everything(self, model, image):
        spec = spec_for(model, 1.0)
        blob_all = encode_image(model, image, spec, p_thresh=1.0)
        blob_default = encode_image(model, image, spec)
        assert len(blob_all) >= len(blob_default)
        out = decode_image(model, blob_all)
        assert out.shape == image.shape

    def test_adversarial_sigma_straddles_boundary(self):
        """Encoder and decoder skip decisions agree for scales straddling
        the threshold boundary, and symbols round-trip bitwise."""
        rng = np.random.default_rng(94)
        delta, p = 1.0, 0.9
        boundary = skip_boundary_sigma(delta, p)
        eps = np.array([-1e-9, -1e-12, 0.0, 1e-12, 1e-9, -1e-4, 1e-4])
        sigma = boundary * (1.0 + np.tile(eps, 30))
        n = sigma.size
        mu = np.where(rng.random(n) < 0.5, 0.0, rng.normal(0, 3, n))
        values = round_to_grid(rng.normal(0, 2, n), delta)

        skip_enc = C._skip_mask(mu, sigma, delta, p)
        payload, effective, coded = C._encode_conditional(
            values.reshape(1, 1, 1, n), mu.reshape(1, 1, 1, n),
            sigma.reshape(1, 1, 1, n), delta, p, (0, n))
        out = np.zeros(n)
        decoded_count = C._decode_conditional(
            payload, mu.reshape(1, 1, 1, n), sigma.reshape(1, 1, 1, n),
            delta, p, (0, n), out, "adversarial")
        assert decoded_count == coded == int((~skip_enc).sum())
        assert np.array_equal(out, effective.reshape(-1))
        assert np.array_equal(out[~skip_enc], values[~skip_enc])
        assert np.array_equal(out[skip_enc], mean_symbol(mu, delta)[skip_enc])

    def test_escape_path_roundtrip(self):
        # an outlier far outside the table span goes through the escape slot
        mu = np.zeros((1, 1, 1, 3))
        sigma = np.full((1, 1, 1, 3), 0.4)
        values = np.array([0.0, 500.0, -1.0]).reshape(1, 1, 1, 3)
        payload, effective, coded = C._encode_conditional(
            values, mu, sigma, 1.0, 0.9, (0, 3))
        out = np.zeros(3)
        C._decode_conditional(payload, mu, sigma, 1.0, 0.9, (0, 3), out, "esc")
        assert coded == 3
        assert np.array_equal(out, values.reshape(-1))


class TestProgressive:
    def test_level1_stream_has_only_base_section(self, model, image):
        blob = encode_image(model, image, spec_for(model, 1.0), levels=1.0)
        info = inspect_bitstream(blob)
        assert info["levels"] == 1.0
        assert info["section_bytes"]["z0"] > 0
        assert info["section_bytes"]["z1"] == 0
        assert info["section_bytes"]["z2a"] == 0
        assert info["section_bytes"]["z2b"] == 0

    def test_lower_levels_smaller_files(self, model, image):
        spec = spec_for(model, 0.5)
        sizes = [len(encode_image(model, image, spec, levels=lv))
                 for lv in (1.0, 2.0, 2.5, 3.0)]
        assert sizes == sorted(sizes)
        assert len(set(sizes)) == 4

    def test_truncation_matches_direct_encode(self, model, image):
        spec = spec_for(model, 0.5)
        full = encode_image(model, image, spec, levels=3.0)
        for lv in (1.0, 2.0, 2.5):
            direct = encode_image(model, image, spec, levels=lv)
            assert truncate_bitstream(full, lv) == direct

    def test_truncate_idempotent(self, model, image):
        full = encode_image(model, image, spec_for(model, 0.5))
        t = truncate_bitstream(full, 2.0)
        assert truncate_bitstream(t, 2.0) == t

    def test_truncate_to_1_then_decode_equals_1_level_decode(self, model, image):
        full = encode_image(model, image, spec_for(model, 0.5))
        a = decode_image(model, truncate_bitstream(full, 1.0), levels=1.0)
        b = decode_image(model, full, levels=1.0)
        assert np.array_equal(a, b)

    def test_cannot_raise_level(self, model, image):
        blob = encode_image(model, image, spec_for(model, 1.0), levels=2.0)
        with pytest.raises(FormatError, match="holds"):
            decode_image(model, blob, levels=3.0)
        with pytest.raises(FormatError, match="truncate"):
            truncate_bitstream(blob, 3.0)

    def test_partial_decode_between_whole_levels(self, model, image):
        spec = spec_for(model, 0.25)
        full = encode_image(model, image, spec, levels=3.0)
        outs = {lv: decode_image(model, full, levels=lv) for lv in (2.0, 2.5, 3.0)}
        e2 = np.mean((outs[2.0] - image) ** 2)
        e25 = np.mean((outs[2.5] - image) ** 2)
        e3 = np.mean((outs[3.0] - image) ** 2)
        assert e3 < e25 < e2


class TestContainer:
    def test_inspect_fields(self, model, image):
        spec = spec_for(model, 1.0)
        blob = encode_image(model, image, spec, levels=3.0)
        info = inspect_bitstream(blob)
        assert info["levels"] == 3.0
        assert info["original_size"] == (32, 32)
        assert info["padded_size"] == (32, 32)
        assert info["channels"] == 3
        assert info["p_thresh"] == 0.9
        assert len(info["delta0"]) == model.base_channels
        assert info["total_bytes"] == len(blob)

    def test_header_crc_detects_corruption(self, model, image):
        blob = bytearray(encode_image(model, image, spec_for(model, 1.0)))
        blob[30] ^= 0x01
        with pytest.raises((FormatError, ModelMismatchError)):
            inspect_bitstream(bytes(blob))
            decode_image(model, bytes(blob))

    def test_truncated_payload_names_section(self, model, image):
        blob = encode_image(model, image, spec_for(model, 1.0))
        with pytest.raises(FormatError, match="section"):
            decode_image(model, blob[:-10])

    def test_wrong_model_rejected(self, model, image):
        blob = encode_image(model, image, spec_for(model, 1.0))
        other = FlowModel(FlowConfig(in_channels=3, steps=2, blocks=1, hidden=16, seed=99))
        with pytest.raises(ModelMismatchError, match="produced by model"):
            decode_image(other, blob)

    def test_wrong_channel_image_rejected(self, model):
        with pytest.raises(ModelMismatchError, match="channel"):
            encode_image(model, np.zeros((1, 16, 16)), spec_for(model, 1.0))

    def test_bad_magic(self):
        with pytest.raises(FormatError, match="magic"):
            inspect_bitstream(b"JUNKJUNKJUNKJUNK" * 8)
