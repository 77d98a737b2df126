"""Entropy coding of latents and the bitstream container.

Encoding runs the decoder's own conditioning chain: the base latents go
first under the per-channel prior, then each conditional level is coded
(or skipped) against (mean, scale) computed from features rebuilt out of
the already-quantized deeper latents.  An element is skipped exactly
when the bin mass at its conditional mean symbol exceeds the threshold,
in which case both sides substitute that mean symbol; encoder and
decoder therefore agree on every skip decision by construction, and the
coder path always evaluates the models in float64.

Container layout (`NFB1`, little-endian): a CRC-protected header (model
id, original and padded extents, quantization steps, threshold, level
mask, per-channel base symbol ranges, section byte lengths) followed by
the payload sections z0, z1, z2a, z2b.  The finest level is coded as two
independent streams split at a fixed raster position so that a partial-
quality stream is a byte prefix; truncation drops whole trailing
sections and never needs the model.

One coder state per stream; many streams may run concurrently over a
shared immutable model.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .entropy import QuantSpec, logistic_bin_prob, mean_symbol
from .errors import FormatError, ModelMismatchError, NumericError
from .flow import LEVELS, FlowModel, LatentSet
from .quantize import grid_index, round_to_grid
from .rangecoder import MAX_SYMBOLS, FrequencyTable, RangeDecoder, RangeEncoder, build_freq_table
from .tensor import Tensor, no_grad

BITSTREAM_MAGIC = b"NFB1"
BITSTREAM_VERSION = 1
P_THRESH_DEFAULT = 0.9
PARTIAL_FRACTION_DEFAULT = 0.5

LEVEL_CODES = {1.0: 10, 2.0: 20, 2.5: 25, 3.0: 30}
CODE_LEVELS = {v: k for k, v in LEVEL_CODES.items()}

_SECTION_NAMES = ("z0", "z1", "z2a", "z2b")


# -- container -----------------------------------------------------------------


@dataclass
class Header:
    model_id: bytes
    orig_h: int
    orig_w: int
    pad_h: int
    pad_w: int
    channels: int
    p_thresh: float
    level_mask: float
    partial_frac: float
    partial_count: int
    spec: QuantSpec
    base_ranges: list[tuple[int, int]]
    section_lengths: dict[str, int]

    def sections_present(self) -> list[str]:
        out = ["z0"]
        if self.level_mask >= 2.0:
            out.append("z1")
        if self.level_mask >= 2.5:
            out.append("z2a")
        if self.level_mask >= 3.0:
            out.append("z2b")
        return out


def _pack_header(h: Header) -> bytes:
    out = bytearray(BITSTREAM_MAGIC)
    out += struct.pack("<B", BITSTREAM_VERSION)
    out += h.model_id
    out += struct.pack("<IIIIH", h.orig_h, h.orig_w, h.pad_h, h.pad_w, h.channels)
    out += struct.pack("<dBdI", h.p_thresh, LEVEL_CODES[h.level_mask],
                       h.partial_frac, h.partial_count)
    out += struct.pack("<ddH", h.spec.delta2, h.spec.delta1, len(h.spec.delta0))
    out += struct.pack(f"<{len(h.spec.delta0)}d", *h.spec.delta0)
    for k_min, k_max in h.base_ranges:
        out += struct.pack("<hh", k_min, k_max)
    for name in _SECTION_NAMES:
        out += struct.pack("<Q", h.section_lengths.get(name, 0))
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def _parse_header(blob: bytes) -> tuple[Header, int]:
    if blob[:4] != BITSTREAM_MAGIC:
        raise FormatError(f"bad bitstream magic {blob[:4]!r}")
    pos = 4
    (version,) = struct.unpack_from("<B", blob, pos)
    pos += 1
    if version != BITSTREAM_VERSION:
        raise FormatError(f"unsupported bitstream version {version}")
    model_id = blob[pos : pos + 16]
    pos += 16
    orig_h, orig_w, pad_h, pad_w, channels = struct.unpack_from("<IIIIH", blob, pos)
    pos += struct.calcsize("<IIIIH")
    p_thresh, level_code, partial_frac, partial_count = struct.unpack_from("<dBdI", blob, pos)
    pos += struct.calcsize("<dBdI")
    if level_code not in CODE_LEVELS:
        raise FormatError(f"unknown level mask code {level_code}")
    delta2, delta1, n_ch = struct.unpack_from("<ddH", blob, pos)
    pos += struct.calcsize("<ddH")
    delta0 = np.array(struct.unpack_from(f"<{n_ch}d", blob, pos))
    pos += 8 * n_ch
    base_ranges = []
    for _ in range(n_ch):
        k_min, k_max = struct.unpack_from("<hh", blob, pos)
        base_ranges.append((k_min, k_max))
        pos += 4
    lengths = {}
    for name in _SECTION_NAMES:
        (lengths[name],) = struct.unpack_from("<Q", blob, pos)
        pos += 8
    (crc,) = struct.unpack_from("<I", blob, pos)
    if zlib.crc32(blob[:pos]) != crc:
        raise FormatError("bitstream header CRC mismatch")
    pos += 4
    header = Header(
        model_id=model_id, orig_h=orig_h, orig_w=orig_w, pad_h=pad_h, pad_w=pad_w,
        channels=channels, p_thresh=p_thresh, level_mask=CODE_LEVELS[level_code],
        partial_frac=partial_frac, partial_count=partial_count,
        spec=QuantSpec(delta2, delta1, delta0),
        base_ranges=base_ranges, section_lengths=lengths,
    )
    return header, pos


def _split_sections(blob: bytes, header: Header, start: int) -> dict[str, bytes]:
    sections = {}
    pos = start
    for name in _SECTION_NAMES:
        n = header.section_lengths.get(name, 0)
        part = blob[pos : pos + n]
        if len(part) != n:
            level = {"z0": "z0", "z1": "z1", "z2a": "z2 (partial)", "z2b": "z2"}[name]
            raise FormatError(f"bitstream truncated inside section {level}")
        sections[name] = part
        pos += n
    return sections


def inspect_bitstream(blob: bytes) -> dict:
    """Header fields and per-section byte lengths, no model required."""
    header, start = _parse_header(blob)
    _split_sections(blob, header, start)
    return {
        "model_id": header.model_id.hex(),
        "original_size": (header.orig_h, header.orig_w),
        "padded_size": (header.pad_h, header.pad_w),
        "channels": header.channels,
        "p_thresh": header.p_thresh,
        "levels": header.level_mask,
        "partial_fraction": header.partial_frac,
        "partial_count": header.partial_count,
        "delta2": header.spec.delta2,
        "delta1": header.spec.delta1,
        "delta0": header.spec.delta0.tolist(),
        "section_bytes": dict(header.section_lengths),
        "total_bytes": len(blob),
    }


# -- padding ----------------------------------------------------------------------


def pad_to_multiple(image: np.ndarray, multiple: int) -> np.ndarray:
    """Mirror-pad (C,H,W) on the bottom/right to extent multiples."""
    _, h, w = image.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return image
    out = image
    while ph or pw:
        # symmetric padding caps at the current extents; loop for tiny images
        step_h = min(ph, out.shape[1])
        step_w = min(pw, out.shape[2])
        out = np.pad(out, ((0, 0), (0, step_h), (0, step_w)), mode="symmetric")
        ph -= step_h
        pw -= step_w
    return out


# -- conditioning helpers ------------------------------------------------------------


def _as_f64_tensor(a: np.ndarray) -> Tensor:
    return Tensor(np.ascontiguousarray(a, dtype=np.float64))


def _conditionals(model: FlowModel, level: int, zs: list) -> tuple[np.ndarray, np.ndarray]:
    """(mu, sigma) for `level`, from features rebuilt off quantized deeper
    latents; float64, identical on encoder and decoder."""
    with no_grad():
        zl = [None if z is None else _as_f64_tensor(z) for z in zs]
        h = model.reconstruct_features(level, zl)
        mu, sigma = model.conditioning_params(level, h)
    return mu.data, sigma.data


def _skip_mask(mu: np.ndarray, sigma: np.ndarray, delta: float, p_thresh: float) -> np.ndarray:
    """True where the decoder will substitute the mean symbol.

    An element is coded iff the bin mass at its mean symbol is <= the
    threshold (code-when-uncertain); otherwise no information is sent.
    """
    p_mean = logistic_bin_prob(mean_symbol(mu, delta), mu, sigma, delta)
    return p_mean > p_thresh


def _logistic_table(mu: float, sigma: float, delta: float) -> FrequencyTable:
    """Per-element table over a quantile span around the mean symbol.

    The half-width tracks sigma/delta with a taper at very fine steps so
    floor counts stay a small fraction of the total; genuine outliers go
    through the escape slot.  Pure function of (mu, sigma, delta), so
    both coder sides rebuild the identical table.
    """
    k_mu = int(np.round(mu / delta))
    r = sigma / delta
    reach = 20.0 if r <= 100.0 else max(6.0, 2000.0 / r)
    w = int(np.ceil(reach * r)) + 1
    w = min(w, 8191)  # flat conditionals fall back to escapes beyond this
    grid = (k_mu + np.arange(-w, w + 1, dtype=np.float64)) * delta
    probs = logistic_bin_prob(grid, mu, sigma, delta)
    return build_freq_table(probs, k_mu - w)


# -- base level (z0) --------------------------------------------------------------


def _base_tables(model: FlowModel, spec: QuantSpec,
                 ranges: list[tuple[int, int]]) -> list[FrequencyTable]:
    """Per-channel prior tables over the header-declared symbol ranges.

    Evaluated in one padded prior call so coder and rate paths share the
    exact same CDF code.
    """
    widths = [hi - lo + 1 for lo, hi in ranges]
    n_max = max(widths)
    c = len(ranges)
    values = np.zeros((c, n_max), dtype=np.float64)
    for i, (lo, _) in enumerate(ranges):
        values[i] = (lo + np.arange(n_max, dtype=np.float64)) * spec.delta0[i]
    with no_grad():
        probs = model.prior.bin_prob(_as_f64_tensor(values), spec.delta0).data
    return [build_freq_table(probs[i, : widths[i]], ranges[i][0]) for i in range(c)]


def _base_ranges(z0_hat: np.ndarray, spec: QuantSpec) -> list[tuple[int, int]]:
    ranges = []
    c = z0_hat.shape[1]
    for i in range(c):
        k = grid_index(z0_hat[0, i], spec.delta0[i])
        lo, hi = int(k.min()), int(k.max())
        if lo < -32768 or hi > 32767:
            raise NumericError(
                f"base channel {i} symbols [{lo}, {hi}] exceed the 16-bit header range; "
                "use a coarser step"
            )
        if hi - lo + 1 > MAX_SYMBOLS:
            raise NumericError(
                f"base channel {i} spans {hi - lo + 1} symbols (> {MAX_SYMBOLS}); "
                "use a coarser step"
            )
        ranges.append((lo, hi))
    return ranges


# -- level coding -------------------------------------------------------------------


def _encode_base(z0_hat: np.ndarray, spec: QuantSpec, tables: list[FrequencyTable]) -> bytes:
    enc = RangeEncoder()
    c = z0_hat.shape[1]
    for i in range(c):
        ks = grid_index(z0_hat[0, i], spec.delta0[i]).reshape(-1)
        table = tables[i]
        for k in ks:
            enc.encode_symbol(table, int(k))
    return enc.finish()


def _decode_base(payload: bytes, header: Header, tables: list[FrequencyTable],
                 shape: tuple[int, int, int]) -> np.ndarray:
    c, hh, ww = shape
    dec = RangeDecoder(payload, "section z0")
    out = np.zeros((1, c, hh, ww), dtype=np.float64)
    for i in range(c):
        table = tables[i]
        ks = np.array([dec.decode_symbol(table) for _ in range(hh * ww)], dtype=np.float64)
        out[0, i] = (ks * header.spec.delta0[i]).reshape(hh, ww)
    return out


def _encode_conditional(values_hat: np.ndarray, mu: np.ndarray, sigma: np.ndarray,
                        delta: float, p_thresh: float,
                        element_range: tuple[int, int]) -> tuple[bytes, np.ndarray, int]:
    """Code one slice of a conditional level; returns (payload, effective
    values after mean substitution, coded-symbol count)."""
    flat_v = values_hat.reshape(-1)
    flat_mu = mu.reshape(-1)
    flat_sigma = sigma.reshape(-1)
    skip = _skip_mask(flat_mu, flat_sigma, delta, p_thresh)
    means = mean_symbol(flat_mu, delta)
    lo, hi = element_range
    enc = RangeEncoder()
    coded = 0
    effective = flat_v.copy()
    for j in range(lo, hi):
        if skip[j]:
            effective[j] = means[j]
            continue
        table = _logistic_table(flat_mu[j], flat_sigma[j], delta)
        enc.encode_symbol(table, int(np.round(flat_v[j] / delta)))
        coded += 1
    return enc.finish(), effective.reshape(values_hat.shape), coded


def _decode_conditional(payload: bytes | None, mu: np.ndarray, sigma: np.ndarray,
                        delta: float, p_thresh: float,
                        element_range: tuple[int, int], out_flat: np.ndarray,
                        context: str) -> int:
    """Mirror of `_encode_conditional` writing into out_flat; a None
    payload substitutes the mean symbol everywhere in the slice."""
    flat_mu = mu.reshape(-1)
    flat_sigma = sigma.reshape(-1)
    means = mean_symbol(flat_mu, delta)
    lo, hi = element_range
    if payload is None:
        out_flat[lo:hi] = means[lo:hi]
        return 0
    skip = _skip_mask(flat_mu, flat_sigma, delta, p_thresh)
    dec = RangeDecoder(payload, context)
    coded = 0
    for j in range(lo, hi):
        if skip[j]:
            out_flat[j] = means[j]
            continue
        table = _logistic_table(flat_mu[j], flat_sigma[j], delta)
        out_flat[j] = dec.decode_symbol(table) * delta
        coded += 1
    return coded


# -- public encode/decode --------------------------------------------------------------


def encode_image(model: FlowModel, image: np.ndarray, spec: QuantSpec,
                 levels: float = 3.0, p_thresh: float = P_THRESH_DEFAULT,
                 partial_frac: float = PARTIAL_FRACTION_DEFAULT) -> bytes:
    """Compress a (C,H,W) image in [0, 255] into a bitstream.

    Pads to the transform's extent multiple, rounds each latent level to
    its grid, entropy-codes the sections named by `levels`, and records
    everything a decoder needs in the container header.
    """
    if levels not in LEVEL_CODES:
        raise ValueError(f"levels must be one of {sorted(LEVEL_CODES)}, got {levels}")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != model.config.in_channels:
        raise ModelMismatchError(
            f"image of shape {image.shape} does not match a "
            f"{model.config.in_channels}-channel model"
        )
    if len(spec.delta0) != model.base_channels:
        raise ModelMismatchError(
            f"step set declares {len(spec.delta0)} base channels, model has "
            f"{model.base_channels}"
        )
    orig_h, orig_w = image.shape[1], image.shape[2]
    padded = pad_to_multiple(image, 2 ** LEVELS)

    with no_grad():
        zs, _ = model.forward(_as_f64_tensor(padded[None]))
    z2 = round_to_grid(zs[0].data.astype(np.float64), spec.delta2)
    z1 = round_to_grid(zs[1].data.astype(np.float64), spec.delta1)
    z0 = round_to_grid(zs[2].data.astype(np.float64), spec.delta0[None, :, None, None])

    ranges = _base_ranges(z0, spec)
    tables = _base_tables(model, spec, ranges)
    sections: dict[str, bytes] = {"z0": _encode_base(z0, spec, tables)}

    n_z2 = z2[0].size
    partial_count = int(np.ceil(partial_frac * n_z2))
    z1_eff, z2_eff = z1, z2
    if levels >= 2.0:
        mu1, sig1 = _conditionals(model, 1, [None, None, z0])
        payload, z1_eff, _ = _encode_conditional(z1, mu1, sig1, spec.delta1,
                                                 p_thresh, (0, z1[0].size))
        sections["z1"] = payload
    if levels >= 2.5:
        mu2, sig2 = _conditionals(model, 0, [None, z1_eff, z0])
        payload_a, z2_eff, _ = _encode_conditional(z2, mu2, sig2, spec.delta2,
                                                   p_thresh, (0, partial_count))
        sections["z2a"] = payload_a
        if levels >= 3.0:
            payload_b, z2_eff, _ = _encode_conditional(z2_eff, mu2, sig2, spec.delta2,
                                                       p_thresh, (partial_count, n_z2))
            sections["z2b"] = payload_b

    header = Header(
        model_id=model.model_id, orig_h=orig_h, orig_w=orig_w,
        pad_h=padded.shape[1], pad_w=padded.shape[2],
        channels=model.config.in_channels, p_thresh=p_thresh, level_mask=levels,
        partial_frac=partial_frac, partial_count=partial_count,
        spec=spec, base_ranges=ranges,
        section_lengths={name: len(sections.get(name, b"")) for name in _SECTION_NAMES},
    )
    return _pack_header(header) + b"".join(
        sections.get(name, b"") for name in _SECTION_NAMES
    )


def decode_latents(model: FlowModel, blob: bytes,
                   levels: float | None = None) -> tuple[LatentSet, Header]:
    """Entropy-decode a bitstream into its quantized latent set.

    Latents of levels beyond `levels` (or beyond what the stream holds)
    are filled with their conditional mean symbols, exactly as the
    sampling path defines.
    """
    header, start = _parse_header(blob)
    if header.model_id != model.model_id:
        raise ModelMismatchError(
            f"bitstream was produced by model {header.model_id.hex()}, "
            f"decoding with {model.model_id.hex()}"
        )
    if levels is None:
        levels = header.level_mask
    if levels not in LEVEL_CODES:
        raise ValueError(f"levels must be one of {sorted(LEVEL_CODES)}, got {levels}")
    if levels > header.level_mask:
        raise FormatError(
            f"requested {levels} levels but the stream holds {header.level_mask}"
        )
    sections = _split_sections(blob, header, start)
    spec = header.spec
    shapes = model.latent_shapes(header.pad_h, header.pad_w)

    tables = _base_tables(model, spec, header.base_ranges)
    z0 = _decode_base(sections["z0"], header, tables, shapes[2])

    # level z1
    mu1, sig1 = _conditionals(model, 1, [None, None, z0])
    z1 = np.zeros((1,) + shapes[1], dtype=np.float64)
    flat1 = z1.reshape(-1)
    payload1 = sections["z1"] if levels >= 2.0 else None
    _decode_conditional(payload1, mu1, sig1, spec.delta1, header.p_thresh,
                        (0, flat1.size), flat1, "section z1")
    z1 = flat1.reshape((1,) + shapes[1])

    # level z2, possibly split into a transmitted prefix and a mean tail
    mu2, sig2 = _conditionals(model, 0, [None, z1, z0])
    z2 = np.zeros((1,) + shapes[0], dtype=np.float64)
    flat2 = z2.reshape(-1)
    cut = header.partial_count
    payload_a = sections["z2a"] if levels >= 2.5 else None
    payload_b = sections["z2b"] if levels >= 3.0 else None
    _decode_conditional(payload_a, mu2, sig2, spec.delta2, header.p_thresh,
                        (0, cut), flat2, "section z2 (partial)")
    _decode_conditional(payload_b, mu2, sig2, spec.delta2, header.p_thresh,
                        (cut, flat2.size), flat2, "section z2")
    z2 = flat2.reshape((1,) + shapes[0])

    return LatentSet(z0=z0, z1=z1, z2=z2), header


def decode_image(model: FlowModel, blob: bytes, levels: float | None = None) -> np.ndarray:
    """Decompress to a (C,H,W) float image at the original extents."""
    latents, header = decode_latents(model, blob, levels)
    with no_grad():
        x = model.inverse([
            _as_f64_tensor(latents.z2),
            _as_f64_tensor(latents.z1),
            _as_f64_tensor(latents.z0),
        ])
    return x.data[0, :, : header.orig_h, : header.orig_w]


def truncate_bitstream(blob: bytes, target: float) -> bytes:
    """Drop trailing sections to the target level mask; model-free."""
    if target not in LEVEL_CODES:
        raise ValueError(f"target must be one of {sorted(LEVEL_CODES)}, got {target}")
    header, start = _parse_header(blob)
    if target > header.level_mask:
        raise FormatError(
            f"cannot truncate to {target} levels: stream holds {header.level_mask}"
        )
    sections = _split_sections(blob, header, start)
    keep = {"z0"}
    if target >= 2.0:
        keep.add("z1")
    if target >= 2.5:
        keep.add("z2a")
    if target >= 3.0:
        keep.add("z2b")
    new_header = Header(
        model_id=header.model_id, orig_h=header.orig_h, orig_w=header.orig_w,
        pad_h=header.pad_h, pad_w=header.pad_w, channels=header.channels,
        p_thresh=header.p_thresh, level_mask=target,
        partial_frac=header.partial_frac, partial_count=header.partial_count,
        spec=header.spec, base_ranges=header.base_ranges,
        section_lengths={
            name: (header.section_lengths[name] if name in keep else 0)
            for name in _SECTION_NAMES
        },
    )
    return _pack_header(new_header) + b"".join(
        sections[name] for name in _SECTION_NAMES if name in keep
    )
