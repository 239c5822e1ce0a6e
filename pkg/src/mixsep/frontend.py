"""Signal ingestion: audio files, STFT/iSTFT, VAD, segmentation, embeddings.

The WAV reader interprets RIFF/WAVE PCM 16/24-bit and 32-bit float payloads
bit-exactly; the STFT uses a Hann analysis window zero-padded to the FFT
size and a least-squares (COLA-compliant) dual window for synthesis, so the
round trip is exact on the covered interior.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, signal

from .cacg import StftTensor
from .errors import InvalidInputError
from .vmf import EmbeddingSequence

logger = logging.getLogger(__name__)

EMBEDDING_MAGIC = b"EMB1"


@dataclass(frozen=True)
class AudioBuffer:
    """Multichannel waveform, shape (C, N)."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim == 1:
            samples = samples[None, :]
        if samples.ndim != 2:
            raise InvalidInputError("samples must have shape (C, N)")
        if self.sample_rate <= 0:
            raise InvalidInputError("sample_rate must be positive")
        object.__setattr__(self, "samples", samples)

    @property
    def num_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate


@dataclass(frozen=True)
class VadMask:
    """Per-frame voice activity decisions."""

    frames: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "frames", np.asarray(self.frames, dtype=bool))

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class SegmentSpec:
    """Half-open frame range [start_frame, end_frame) with an identifier."""

    start_frame: int
    end_frame: int
    id: str

    def __post_init__(self):
        if self.start_frame < 0 or self.end_frame <= self.start_frame:
            raise InvalidInputError("segment frame range must be nonempty and nonnegative")

    @property
    def num_frames(self) -> int:
        return self.end_frame - self.start_frame


# ---------------------------------------------------------------------------
# WAV input/output


def read_wav(path) -> AudioBuffer:
    """Read a RIFF/WAVE file (PCM 16/24-bit or 32-bit float, multichannel)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise InvalidInputError(f"{path} is not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(blob):
        cid = blob[pos : pos + 4]
        size = struct.unpack("<I", blob[pos + 4 : pos + 8])[0]
        body = blob[pos + 8 : pos + 8 + size]
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise InvalidInputError(f"{path} misses fmt or data chunk")
    tag, channels, rate, _, _, bits = struct.unpack("<HHIIHH", fmt[:16])
    if tag == 0xFFFE:  # extensible: actual format in the first subformat bytes
        tag = struct.unpack("<H", fmt[24:26])[0]
    frame_bytes = channels * bits // 8
    n = len(data) // frame_bytes
    data = data[: n * frame_bytes]
    if tag == 1 and bits == 16:
        flat = np.frombuffer(data, dtype="<i2").astype(float) / 32768.0
    elif tag == 1 and bits == 24:
        raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, 3)
        ints = (
            raw[:, 0].astype(np.int32)
            | (raw[:, 1].astype(np.int32) << 8)
            | (raw[:, 2].astype(np.int32) << 16)
        )
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
        flat = ints.astype(float) / float(1 << 23)
    elif tag == 3 and bits == 32:
        flat = np.frombuffer(data, dtype="<f4").astype(float)
    else:
        raise InvalidInputError(f"unsupported WAV format tag={tag} bits={bits}")
    samples = flat.reshape(n, channels).T
    return AudioBuffer(samples, rate)


def write_wav(path, audio: AudioBuffer, fmt: str = "float32"):
    """Write a WAV file; ``fmt`` is "float32" or "pcm16"."""
    samples = audio.samples.T  # (N, C)
    channels = samples.shape[1]
    if fmt == "float32":
        payload = samples.astype("<f4").tobytes()
        tag, bits = 3, 32
    elif fmt == "pcm16":
        clipped = np.clip(samples, -1.0, 32767.0 / 32768.0)
        payload = (np.round(clipped * 32768.0)).astype("<i2").tobytes()
        tag, bits = 1, 16
    else:
        raise InvalidInputError(f"unsupported output format {fmt!r}")
    block = channels * bits // 8
    fmt_chunk = struct.pack(
        "<HHIIHH", tag, channels, audio.sample_rate, audio.sample_rate * block, block, bits
    )
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt_chunk)) + fmt_chunk
    body += b"data" + struct.pack("<I", len(payload)) + payload
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", len(body)) + body)


# ---------------------------------------------------------------------------
# STFT / iSTFT


def _stft_sizes(sample_rate: int, stft_size_ms: float, window_ms: float, shift_ms: float):
    sizes = []
    for ms in (stft_size_ms, window_ms, shift_ms):
        samples = ms * sample_rate / 1000.0
        if abs(samples - round(samples)) > 1e-9:
            raise InvalidInputError(f"{ms} ms does not map to whole samples at {sample_rate} Hz")
        sizes.append(int(round(samples)))
    nfft, win, hop = sizes
    if win > nfft:
        raise InvalidInputError("window must not exceed the STFT size")
    if hop <= 0:
        raise InvalidInputError("shift must be positive")
    return nfft, win, hop


def stft(
    audio: AudioBuffer,
    stft_size_ms: float = 64.0,
    window_ms: float = 50.0,
    shift_ms: float = 16.0,
) -> StftTensor:
    """Hann-windowed STFT, frames zero-padded to the FFT size.

    Returns a tensor with ``F = nfft/2 + 1`` bins; audio shorter than one
    window yields an empty (flagged) tensor.
    """
    nfft, win, hop = _stft_sizes(audio.sample_rate, stft_size_ms, window_ms, shift_ms)
    n = audio.num_samples
    if n < win:
        data = np.zeros((audio.num_channels, 0, nfft // 2 + 1), dtype=complex)
        return StftTensor(data, audio.sample_rate, nfft, win, hop)
    window = signal.get_window("hann", win, fftbins=True)
    frames = np.lib.stride_tricks.sliding_window_view(audio.samples, win, axis=1)[:, ::hop, :]
    data = np.fft.rfft(frames * window, n=nfft, axis=2)
    return StftTensor(data, audio.sample_rate, nfft, win, hop)


def istft(spec: np.ndarray, stft_size: int, window_size: int, shift: int) -> np.ndarray:
    """Invert an STFT of shape (..., T, F) via dual-window overlap-add."""
    spec = np.asarray(spec, dtype=complex)
    frames = np.fft.irfft(spec, n=stft_size, axis=-1)[..., :window_size]
    window = signal.get_window("hann", window_size, fftbins=True)
    n_frames = spec.shape[-2]
    n = window_size + (n_frames - 1) * shift if n_frames else 0
    out = np.zeros(spec.shape[:-2] + (n,))
    denom = np.zeros(n)
    for t in range(n_frames):
        sl = slice(t * shift, t * shift + window_size)
        out[..., sl] += frames[..., t, :] * window
        denom[sl] += window**2
    valid = denom > 1e-12
    out[..., valid] /= denom[valid]
    return out


def num_stft_frames(num_samples: int, window_size: int, shift: int) -> int:
    if num_samples < window_size:
        return 0
    return 1 + (num_samples - window_size) // shift


# ---------------------------------------------------------------------------
# Voice activity detection


def energy_vad(
    audio: AudioBuffer,
    window_s: float = 1.5,
    threshold_db: float = 10.0,
    window_ms: float = 50.0,
    shift_ms: float = 16.0,
) -> VadMask:
    """Energy VAD with a minimum-statistics noise floor.

    Per-frame log energy of channel 0 (same framing as the STFT), smoothed
    over 5 frames; the noise floor is the running minimum of the smoothed
    energy over a trailing window of ``window_s`` seconds. A frame is voiced
    when its energy exceeds the floor by ``threshold_db``; the mask is then
    closed with a 200 ms structuring element. Invariant to global gain.
    """
    win = int(round(window_ms * audio.sample_rate / 1000.0))
    hop = int(round(shift_ms * audio.sample_rate / 1000.0))
    n_frames = num_stft_frames(audio.num_samples, win, hop)
    if n_frames == 0:
        return VadMask(np.zeros(0, dtype=bool))
    frames = np.lib.stride_tricks.sliding_window_view(audio.samples[0], win)[::hop]
    energy = 10.0 * np.log10(np.mean(frames**2, axis=1) + 1e-30)
    smoothed = ndimage.uniform_filter1d(energy, size=5, mode="nearest")
    floor_len = max(1, int(round(window_s * 1000.0 / shift_ms)))
    origin = floor_len // 2 - floor_len + 1  # trailing window [t - L + 1, t]
    floor = ndimage.minimum_filter1d(smoothed, size=floor_len, mode="nearest", origin=origin)
    voiced = energy > floor + threshold_db
    close_len = max(1, int(round(200.0 / shift_ms)))
    voiced = ndimage.binary_closing(voiced, structure=np.ones(close_len, dtype=bool))
    return VadMask(voiced)


# ---------------------------------------------------------------------------
# Embedding files


def write_embeddings(path, frames: np.ndarray, frame_rate: float | None = None, extractor=None):
    """Write the binary embedding matrix format (magic EMB1, u32 dims, f32 data)."""
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 2:
        raise InvalidInputError("embedding frames must be a T x E matrix")
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<III", frames.shape[0], frames.shape[1], 0))
        fh.write(frames.astype("<f4").tobytes())
    if frame_rate is not None or extractor is not None:
        meta = {}
        if frame_rate is not None:
            meta["frame_rate"] = frame_rate
        if extractor is not None:
            meta["extractor"] = extractor
        with open(str(path) + ".json", "w") as fh:
            json.dump(meta, fh, sort_keys=True)


def ingest_embeddings(
    path,
    expected_frames: int,
    expected_dim: int | None = None,
    frame_rate: float | None = None,
) -> EmbeddingSequence:
    """Load an EMB1 file, normalize rows, and align to the STFT frame count.

    A count mismatch of at most 2 frames is fixed by truncation or edge
    padding; larger mismatches trigger nearest-frame resampling. The
    alignment action is recorded on the returned sequence.
    """
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != EMBEDDING_MAGIC:
            raise InvalidInputError(f"{path}: bad magic {magic!r}, expected EMB1")
        t_file, e_dim, _reserved = struct.unpack("<III", fh.read(12))
        payload = fh.read(t_file * e_dim * 4)
    if len(payload) != t_file * e_dim * 4:
        raise InvalidInputError(f"{path}: truncated payload")
    frames = np.frombuffer(payload, dtype="<f4").reshape(t_file, e_dim).astype(float)
    if expected_dim is not None and e_dim != expected_dim:
        raise InvalidInputError(f"{path}: embedding dim {e_dim} != configured {expected_dim}")
    if np.isnan(frames).any():
        raise InvalidInputError(f"{path}: NaN embedding rows")

    action = None
    if t_file != expected_frames:
        diff = t_file - expected_frames
        if abs(diff) <= 2:
            if diff > 0:
                frames = frames[:expected_frames]
                action = f"truncated_{diff}"
            else:
                pad = np.repeat(frames[-1:], -diff, axis=0)
                frames = np.concatenate([frames, pad], axis=0)
                action = f"padded_{-diff}"
        else:
            src = np.minimum(
                ((np.arange(expected_frames) + 0.5) * t_file / expected_frames).astype(int),
                t_file - 1,
            )
            frames = frames[src]
            action = f"resampled_{t_file}_to_{expected_frames}"
        logger.info("embedding alignment for %s: %s", path, action)

    if frame_rate is None:
        sidecar = str(path) + ".json"
        try:
            with open(sidecar) as fh:
                frame_rate = json.load(fh).get("frame_rate")
        except OSError:
            frame_rate = None
    return EmbeddingSequence.from_raw(frames, frame_rate or 62.5, alignment_action=action)


# ---------------------------------------------------------------------------
# Segmentation


def split_segments(
    vad: VadMask,
    max_pause_s: float,
    min_len_s: float,
    max_len_s: float,
    frame_rate: float,
) -> list[SegmentSpec]:
    """Cut the recording at long pauses into bounded processing segments.

    Voiced runs separated by pauses of at most ``max_pause_s`` are merged
    greedily while the merged span stays within ``max_len_s``; longer pauses
    always cut. Segments shorter than ``min_len_s`` are dropped.
    """
    frames = vad.frames
    if not frames.any():
        return []
    max_pause = max_pause_s * frame_rate
    max_len = max_len_s * frame_rate
    min_len = min_len_s * frame_rate

    padded = np.concatenate([[False], frames, [False]]).astype(int)
    edges = np.flatnonzero(np.diff(padded))
    runs = list(zip(edges[0::2], edges[1::2]))  # half-open voiced runs

    merged = []
    cur_start, cur_end = runs[0]
    for start, end in runs[1:]:
        gap = start - cur_end
        span = end - cur_start
        if gap <= max_pause and span <= max_len:
            cur_end = end
        else:
            merged.append((cur_start, cur_end))
            cur_start, cur_end = start, end
    merged.append((cur_start, cur_end))

    segments = []
    for start, end in merged:
        if end - start < min_len:
            continue
        segments.append(SegmentSpec(int(start), int(end), f"seg{len(segments):03d}"))
    return segments
