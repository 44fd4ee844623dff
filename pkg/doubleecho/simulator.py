"""Shoebox room acoustics testbed.

Image-source RIRs, device-colored recordings and the benign/attack pair
corpus that stands in for a physical measurement campaign.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import os
import tomllib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Literal, Sequence

import numpy as np
from scipy import fft as spfft
from scipy import signal as sps

from doubleecho.config import derive_seed
from doubleecho.errors import ConfigError, ParameterError
from doubleecho.rir import ImpulseResponse
from doubleecho.signal import AudioSignal, SweepSpec, generate_sweep, read_wav, write_wav
from doubleecho.telemetry import get_tracer

logger = logging.getLogger(__name__)

Vec3 = tuple[float, float, float]
Label = Literal["copresent", "non_copresent"]
COPRESENT: Label = "copresent"
NON_COPRESENT: Label = "non_copresent"

# Wall order: x = 0, x = Lx, y = 0, y = Ly, z = 0, z = Lz.
WALLS = ("west", "east", "south", "north", "floor", "ceiling")
SIM_BAND_CENTERS = (125.0, 250.0, 500.0, 1000.0, 2000.0, 4000.0)

SPEED_OF_SOUND = 343.0
FRACTIONAL_DELAY_TAPS = 8
MAX_AUTO_ORDER = 60
CALIBRATED_PEAK = 0.5
TILT_REFERENCE_HZ = 1000.0
TILT_MIN_HZ = 20.0

# Dataset layout: speaker height range, clearances, and the share of the
# shorter floor side the speaker margin may take.
SPEAKER_HEIGHT = (0.8, 1.5)
CEILING_CLEARANCE = 0.5
WALL_CLEARANCE = 0.2
LAYOUT_WALL_FRACTION = 0.45

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1

# Keys mixed into derive_seed so independent draws never share a stream.
_GEOMETRY_KEY = 1
_POOL_KEY = 2
_ROOM_DEVICES_KEY = 3
_CORPUS_KEY = 4


@dataclass(frozen=True)
class RoomModel:
    """A shoebox room. ``absorption`` lists one α per wall in ``WALLS`` order.

    ``band_absorption``, when set, holds one six-wall row per band in
    ``SIM_BAND_CENTERS`` and replaces ``absorption`` for rendering.
    Without ``max_order`` the reflection order follows ``auto_max_order``.
    """

    dimensions: Vec3
    absorption: tuple[float, ...] = (0.2,) * 6
    speed_of_sound: float = SPEED_OF_SOUND
    max_order: int | None = None
    band_absorption: tuple[tuple[float, ...], ...] | None = None
    name: str = ""

    def __post_init__(self):
        dims = tuple(float(d) for d in self.dimensions)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise ParameterError(f"room dimensions must be three positive lengths, got {self.dimensions}")
        object.__setattr__(self, "dimensions", dims)

        absorption = self.absorption
        if isinstance(absorption, (int, float)):
            absorption = (absorption,) * 6
        absorption = _wall_row(absorption, "absorption")
        object.__setattr__(self, "absorption", absorption)

        if self.band_absorption is not None:
            rows = tuple(_wall_row(row, "band_absorption") for row in self.band_absorption)
            if len(rows) != len(SIM_BAND_CENTERS):
                raise ParameterError(f"band_absorption needs {len(SIM_BAND_CENTERS)} rows, got {len(rows)}")
            object.__setattr__(self, "band_absorption", rows)
        if self.speed_of_sound <= 0:
            raise ParameterError(f"speed_of_sound must be positive, got {self.speed_of_sound}")
        if self.max_order is not None and self.max_order < 0:
            raise ParameterError(f"max_order must be non-negative, got {self.max_order}")

    @property
    def volume(self) -> float:
        lx, ly, lz = self.dimensions
        return lx * ly * lz

    @property
    def wall_areas(self) -> tuple[float, ...]:
        lx, ly, lz = self.dimensions
        return (ly * lz, ly * lz, lx * lz, lx * lz, lx * ly, lx * ly)

    @property
    def surface_area(self) -> float:
        return sum(self.wall_areas)

    @property
    def reflection_order(self) -> int:
        return auto_max_order(self) if self.max_order is None else self.max_order

    def contains(self, point: Sequence[float]) -> bool:
        return all(0.0 < p < dim for p, dim in zip(point, self.dimensions))

    def to_dict(self) -> dict[str, Any]:
        payload = asdict(self)
        payload["dimensions"] = list(self.dimensions)
        payload["absorption"] = list(self.absorption)
        if self.band_absorption is not None:
            payload["band_absorption"] = [list(row) for row in self.band_absorption]
        return payload

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> RoomModel:
        band = doc.get("band_absorption")
        return cls(
            dimensions=tuple(doc["dimensions"]),
            absorption=doc.get("absorption", 0.2),
            speed_of_sound=doc.get("speed_of_sound", SPEED_OF_SOUND),
            max_order=doc.get("max_order"),
            band_absorption=tuple(tuple(row) for row in band) if band is not None else None,
            name=doc.get("name", ""),
        )


def _wall_row(values: Sequence[float], what: str) -> tuple[float, ...]:
    row = tuple(float(v) for v in values)
    if len(row) != 6:
        raise ParameterError(f"{what} needs one coefficient per wall (6), got {len(row)}")
    if any(not 0.0 <= a <= 1.0 for a in row):
        raise ParameterError(f"{what} coefficients must lie in [0, 1], got {row}")
    return row


def sabine_rt60(room: RoomModel, absorption: Sequence[float] | None = None) -> float:
    """Sabine estimate 0.161·V / Σ S·α; infinite for a fully reflective room.

    ``absorption`` overrides the room's broadband wall row, e.g. with one band row.
    """
    absorption = room.absorption if absorption is None else absorption
    absorbing_area = sum(area * alpha for area, alpha in zip(room.wall_areas, absorption))
    if absorbing_area == 0.0:
        return math.inf
    return 0.161 * room.volume / absorbing_area


def auto_max_order(room: RoomModel) -> int:
    """Lowest reflection order whose images hold every arrival within the slowest band's Sabine RT60.

    An order-``n`` image set misses no arrival earlier than
    ``n / (c·sqrt(Σ 1/L²))`` seconds. Capped at ``MAX_AUTO_ORDER``.
    """
    rows = room.band_absorption if room.band_absorption is not None else (room.absorption,)
    rt60 = max(sabine_rt60(room, row) for row in rows)
    if not math.isfinite(rt60):
        return MAX_AUTO_ORDER
    orders_per_second = room.speed_of_sound * math.sqrt(sum(1.0 / d**2 for d in room.dimensions))
    return min(MAX_AUTO_ORDER, max(1, math.ceil(rt60 * orders_per_second)))


@dataclass(frozen=True)
class Placement:
    source: Vec3
    receiver: Vec3

    def __post_init__(self):
        object.__setattr__(self, "source", tuple(float(v) for v in self.source))
        object.__setattr__(self, "receiver", tuple(float(v) for v in self.receiver))
        if len(self.source) != 3 or len(self.receiver) != 3:
            raise ParameterError("source and receiver must be 3-D points")
        if self.source == self.receiver:
            raise ParameterError("source and receiver must differ")

    @property
    def distance(self) -> float:
        return math.dist(self.source, self.receiver)

    def check(self, room: RoomModel) -> None:
        if not room.contains(self.source):
            raise ParameterError(f"source {self.source} is not strictly inside room {room.dimensions}")
        if not room.contains(self.receiver):
            raise ParameterError(f"receiver {self.receiver} is not strictly inside room {room.dimensions}")


@dataclass(frozen=True)
class DeviceProfile:
    """Channel coloring of one recording device. ``snr_db = inf`` adds no noise."""

    gain_db: float = 0.0
    snr_db: float = math.inf
    clock_offset: float = 0.0
    spectral_tilt: float = 0.0
    name: str = ""

    def __post_init__(self):
        if not self.snr_db > 0:
            raise ParameterError(f"snr_db must be positive, got {self.snr_db}")

    def to_dict(self) -> dict[str, Any]:
        payload = asdict(self)
        if math.isinf(self.snr_db):
            payload["snr_db"] = None
        return payload


def device_pool(size: int, seed: int) -> list[DeviceProfile]:
    """Seeded heterogeneous devices, shared across rooms."""
    rng = np.random.default_rng(derive_seed(seed, _POOL_KEY))
    return [
        DeviceProfile(
            gain_db=float(rng.uniform(-12.0, 0.0)),
            snr_db=float(rng.uniform(30.0, 45.0)),
            clock_offset=float(rng.uniform(-0.5, 0.5)),
            spectral_tilt=float(rng.uniform(-1.5, 1.5)),
            name=f"device-{i:02d}",
        )
        for i in range(size)
    ]


@dataclass(frozen=True, eq=False)
class ImageSources:
    """Mirror images of one source. ``wall_hits[i, w]`` counts reflections off wall ``w``."""

    positions: np.ndarray
    wall_hits: np.ndarray

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def order(self) -> np.ndarray:
        return self.wall_hits.sum(axis=1)

    def reflection_gains(self, absorption: Sequence[float]) -> np.ndarray:
        beta = np.sqrt(1.0 - np.asarray(absorption, dtype=np.float64))
        return np.prod(np.power(beta[None, :], self.wall_hits), axis=1)


def _axis_images(x: float, length: float, max_order: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Image coordinates (1 − 2p)·x + 2mL along one axis with their wall hit counts."""
    m = np.arange(-max_order, max_order + 1)
    coords, low, high = [], [], []
    for p in (0, 1):
        lo = np.abs(m - p)
        hi = np.abs(m)
        keep = lo + hi <= max_order
        coords.append((1 - 2 * p) * x + 2 * m[keep] * length)
        low.append(lo[keep])
        high.append(hi[keep])
    return np.concatenate(coords), np.concatenate(low), np.concatenate(high)


def image_sources(room: RoomModel, source: Sequence[float], max_order: int | None = None) -> ImageSources:
    """All images of ``source`` up to ``max_order`` reflections; the direct source comes first."""
    max_order = room.reflection_order if max_order is None else max_order
    axes = [_axis_images(source[k], room.dimensions[k], max_order) for k in range(3)]
    (xc, xl, xh), (yc, yl, yh), (zc, zl, zh) = axes
    yz_order = (yl + yh)[:, None] + (zl + zh)[None, :]

    positions, hits = [], []
    for i in range(len(xc)):
        iy, iz = np.nonzero(xl[i] + xh[i] + yz_order <= max_order)
        if iy.size == 0:
            continue
        positions.append(np.column_stack([np.full(iy.size, xc[i]), yc[iy], zc[iz]]))
        hits.append(np.column_stack([np.full(iy.size, xl[i]), np.full(iy.size, xh[i]), yl[iy], yh[iy], zl[iz], zh[iz]]))

    positions_arr = np.concatenate(positions)
    hits_arr = np.concatenate(hits).astype(np.int64)
    first = np.lexsort((np.arange(len(hits_arr)), hits_arr.sum(axis=1)))
    return ImageSources(positions_arr[first], hits_arr[first])


def _fractional_delay_kernel(delays: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """8-tap Hann-windowed sinc around each delay (in samples)."""
    half = FRACTIONAL_DELAY_TAPS // 2
    base = np.floor(delays).astype(np.int64)
    index = base[:, None] + np.arange(-half + 1, half + 1)[None, :]
    x = index - delays[:, None]
    kernel = np.sinc(x) * 0.5 * (1.0 + np.cos(np.pi * x / half))
    return index, kernel


def _render_arrivals(delays: np.ndarray, amplitudes: np.ndarray, length: int) -> np.ndarray:
    index, kernel = _fractional_delay_kernel(delays)
    weights = amplitudes[:, None] * kernel
    valid = index >= 0
    return np.bincount(index[valid], weights=weights[valid], minlength=length)[:length]


def band_split_masks(freqs: np.ndarray) -> np.ndarray:
    """Complementary masks, one per ``SIM_BAND_CENTERS`` band; they sum to 1 at every frequency.

    Neighbouring bands cross over with a cos² ramp one third of an octave wide,
    centered on the geometric mean of their centers.
    """
    edges = [math.sqrt(a * b) for a, b in zip(SIM_BAND_CENTERS, SIM_BAND_CENTERS[1:])]
    upper_weights = []
    for edge in edges:
        lo, hi = edge / 2 ** (1 / 6), edge * 2 ** (1 / 6)
        u = np.clip(np.log2(np.maximum(freqs, 1e-9) / lo) / math.log2(hi / lo), 0.0, 1.0)
        upper_weights.append(0.5 * (1.0 - np.cos(np.pi * u)))

    masks = np.ones((len(SIM_BAND_CENTERS), len(freqs)))
    for b, upper in enumerate(upper_weights):
        masks[b] *= 1.0 - upper
        masks[b + 1] *= upper
    return masks


def simulate_rir(room: RoomModel, place: Placement, sample_rate: int = 44100) -> ImpulseResponse:
    """Image-source RIR with β = sqrt(1 − α) per reflection and 1/d spreading."""
    place.check(room)
    images = image_sources(room, place.source)
    distances = np.linalg.norm(images.positions - np.asarray(place.receiver)[None, :], axis=1)
    delays = distances / room.speed_of_sound * sample_rate
    length = int(np.floor(delays.max())) + FRACTIONAL_DELAY_TAPS

    if room.band_absorption is None:
        samples = _render_arrivals(delays, images.reflection_gains(room.absorption) / distances, length)
    else:
        freqs = spfft.rfftfreq(length, d=1 / sample_rate)
        masks = band_split_masks(freqs)
        spectrum = np.zeros(len(freqs), dtype=np.complex128)
        for row, mask in zip(room.band_absorption, masks):
            band = _render_arrivals(delays, images.reflection_gains(row) / distances, length)
            spectrum += spfft.rfft(band) * mask
        samples = spfft.irfft(spectrum, length)

    direct_index = round(float(delays[0]))
    logger.debug(f"Rendered {len(images)} image sources, direct arrival at sample {direct_index}")
    return ImpulseResponse(samples, sample_rate, direct_index)


def render_recording(
    rir: ImpulseResponse,
    excitation: AudioSignal,
    device: DeviceProfile,
    seed: int,
) -> AudioSignal:
    """Play ``excitation`` through ``rir`` and record it with ``device``.

    The room response is loudness-calibrated to a fixed peak before the device
    gain, tilt, clock offset and noise are applied.
    """
    if rir.sample_rate != excitation.sample_rate:
        raise ParameterError(f"sample rate mismatch: {rir.sample_rate} Hz vs {excitation.sample_rate} Hz")
    n = len(excitation)
    wet = sps.fftconvolve(excitation.samples, rir.samples)[:n]
    peak = float(np.max(np.abs(wet))) if n else 0.0
    if peak > 0.0:
        wet = wet * (CALIBRATED_PEAK / peak)
    wet = wet * 10 ** (device.gain_db / 20)

    if n and (device.spectral_tilt != 0.0 or device.clock_offset != 0.0):
        freqs = spfft.rfftfreq(n, d=1 / excitation.sample_rate)
        shaping = 10 ** (device.spectral_tilt * np.log2(np.maximum(freqs, TILT_MIN_HZ) / TILT_REFERENCE_HZ) / 20)
        shaping = shaping * np.exp(-2j * np.pi * freqs * device.clock_offset / excitation.sample_rate)
        wet = spfft.irfft(spfft.rfft(wet) * shaping, n)

    if n and math.isfinite(device.snr_db):
        rms = float(np.sqrt(np.mean(wet**2)))
        sigma = rms / 10 ** (device.snr_db / 20)
        wet = wet + np.random.default_rng(seed).normal(0.0, sigma, n)
    return AudioSignal(wet, excitation.sample_rate)


def simulate_recording(
    room: RoomModel,
    place: Placement,
    excitation: AudioSignal,
    device: DeviceProfile,
    seed: int,
) -> AudioSignal:
    with get_tracer().start_as_current_span("simulator.simulate_recording") as span:
        span.set_attribute("doubleecho.room", room.name)
        span.set_attribute("doubleecho.device", device.name)
        rir = simulate_rir(room, place, excitation.sample_rate)
        return render_recording(rir, excitation, device, seed)


def default_room_corpus(count: int = 20, seed: int = 0) -> list[RoomModel]:
    """Procedural rooms of 30–300 m³ with wall α in [0.05, 0.6].

    Each room also gets a frequency-dependent absorption profile so that rooms
    of similar size still differ per band. Reflection orders are automatic.
    """
    rng = np.random.default_rng(derive_seed(seed, _CORPUS_KEY))
    rooms = []
    for index in range(count):
        volume = float(np.exp(rng.uniform(np.log(30.0), np.log(300.0))))
        height = float(rng.uniform(2.5, 3.5))
        aspect = float(rng.uniform(1.0, 1.8))
        ly = math.sqrt(volume / (height * aspect))
        dims = (round(aspect * ly, 3), round(ly, 3), round(height, 3))

        walls = rng.uniform(0.05, 0.6, size=6)
        slope = rng.uniform(-0.5, 0.8)
        trend = 1.0 + slope * (np.arange(len(SIM_BAND_CENTERS)) - 2.5) / 2.5
        band = np.clip(np.outer(trend, walls), 0.05, 0.6)
        rooms.append(RoomModel(
            dimensions=dims,
            absorption=tuple(round(float(a), 4) for a in walls),
            band_absorption=tuple(tuple(round(float(a), 4) for a in row) for row in band),
            name=f"room-{index:02d}",
        ))
    return rooms


@dataclass(frozen=True)
class DatasetConfig:
    rooms: tuple[RoomModel, ...]
    devices_per_room: int = 3
    sessions_per_room: int = 5
    copresence_radius: float = 0.5
    seed: int = 0
    locations_per_room: int = 1
    device_pool: int = 16
    emitter_distance: float = 0.05
    attack_pairs: bool = True
    sweep: SweepSpec = field(default_factory=SweepSpec)

    def __post_init__(self):
        object.__setattr__(self, "rooms", tuple(self.rooms))
        if not self.rooms:
            raise ConfigError("dataset needs at least one room")
        if self.devices_per_room < 2:
            raise ConfigError(f"devices_per_room must be at least 2, got {self.devices_per_room}")
        if self.sessions_per_room < 1 or self.locations_per_room < 1:
            raise ConfigError("sessions_per_room and locations_per_room must be positive")
        if self.device_pool < self.devices_per_room:
            raise ConfigError(f"device_pool ({self.device_pool}) is smaller than devices_per_room ({self.devices_per_room})")
        if not 0 < self.emitter_distance < self.copresence_radius:
            raise ConfigError("emitter_distance must be positive and inside copresence_radius")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.attack_pairs and len(self.rooms) < 2:
            raise ConfigError("attack pairs need at least 2 rooms")
        for index, room in enumerate(self.rooms):
            lx, ly, lz = room.dimensions
            if LAYOUT_WALL_FRACTION * min(lx, ly) <= self.copresence_radius:
                raise ConfigError(
                    f"room {room.name or index} ({lx} x {ly} m) is too small for copresence_radius {self.copresence_radius}"
                )
            if lz - CEILING_CLEARANCE <= SPEAKER_HEIGHT[0]:
                raise ConfigError(
                    f"room {room.name or index} is {lz} m high; the speaker needs more than "
                    f"{SPEAKER_HEIGHT[0] + CEILING_CLEARANCE} m"
                )

    @property
    def slots_per_room(self) -> int:
        return self.locations_per_room * self.sessions_per_room

    def expected_counts(self) -> dict[str, int]:
        r, d, s = len(self.rooms), self.devices_per_room, self.slots_per_room
        attack = s * math.comb(r, 2) * d * d if self.attack_pairs else 0
        return {COPRESENT: r * s * math.comb(d, 2), NON_COPRESENT: attack}

    def to_dict(self) -> dict[str, Any]:
        return {
            "rooms": [room.to_dict() for room in self.rooms],
            "devices_per_room": self.devices_per_room,
            "sessions_per_room": self.sessions_per_room,
            "copresence_radius": self.copresence_radius,
            "seed": self.seed,
            "locations_per_room": self.locations_per_room,
            "device_pool": self.device_pool,
            "emitter_distance": self.emitter_distance,
            "attack_pairs": self.attack_pairs,
            "sweep": asdict(self.sweep),
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> DatasetConfig:
        """Build a config; without a ``rooms`` list the default corpus of ``room_count`` rooms is used."""
        try:
            seed = int(doc.get("seed", 0))
            if "rooms" in doc:
                rooms = [RoomModel.from_dict(room) for room in doc["rooms"]]
            else:
                rooms = default_room_corpus(int(doc.get("room_count", 20)), seed)
            return cls(
                rooms=tuple(rooms),
                devices_per_room=int(doc.get("devices_per_room", 3)),
                sessions_per_room=int(doc.get("sessions_per_room", 5)),
                copresence_radius=float(doc.get("copresence_radius", 0.5)),
                seed=seed,
                locations_per_room=int(doc.get("locations_per_room", 1)),
                device_pool=int(doc.get("device_pool", 16)),
                emitter_distance=float(doc.get("emitter_distance", 0.05)),
                attack_pairs=bool(doc.get("attack_pairs", True)),
                sweep=SweepSpec(**doc.get("sweep", {})),
            )
        except (KeyError, TypeError, ParameterError) as e:
            raise ConfigError(f"invalid dataset config: {e}") from e

    @classmethod
    def load(cls, path: str | os.PathLike) -> DatasetConfig:
        path = Path(path)
        try:
            if path.suffix == ".toml":
                with path.open("rb") as f:
                    doc = tomllib.load(f)
            elif path.suffix == ".json":
                doc = json.loads(path.read_text())
            else:
                raise ConfigError(f"{path}: dataset config must be .json or .toml")
        except FileNotFoundError as e:
            raise ConfigError(f"dataset config {path} does not exist") from e
        except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
            raise ConfigError(f"{path}: {e}") from e
        return cls.from_dict(doc)


@dataclass(frozen=True, eq=False)
class Recording:
    recording_id: str
    room: int
    slot: int
    device: int
    role: Literal["emitter", "listener"]
    signal: AudioSignal


@dataclass(frozen=True)
class RecordingPair:
    pair_id: str
    a: str
    b: str
    label: Label
    room_a: int
    room_b: int
    slot: int
    location: int = 0


@dataclass(frozen=True, eq=False)
class Dataset:
    excitation: AudioSignal
    sweep: SweepSpec
    recordings: dict[str, Recording]
    pairs: list[RecordingPair]
    seed: int = 0
    rooms: tuple[RoomModel, ...] = ()
    devices: tuple[DeviceProfile, ...] = ()

    def counts(self) -> dict[str, int]:
        benign = sum(1 for pair in self.pairs if pair.label == COPRESENT)
        return {COPRESENT: benign, NON_COPRESENT: len(self.pairs) - benign}

    def without(self, recording_ids: set[str]) -> Dataset:
        """Drop recordings and every pair that uses one of them."""
        recordings = {rid: rec for rid, rec in self.recordings.items() if rid not in recording_ids}
        pairs = [p for p in self.pairs if p.a not in recording_ids and p.b not in recording_ids]
        return Dataset(self.excitation, self.sweep, recordings, pairs, self.seed, self.rooms, self.devices)

    def write(self, directory: str | os.PathLike) -> Path:
        """Write WAVs and ``manifest.json`` under ``directory``; returns the manifest path."""
        directory = Path(directory)
        (directory / "recordings").mkdir(parents=True, exist_ok=True)
        write_wav(self.excitation, directory / "excitation.wav")

        recordings = []
        for rec in self.recordings.values():
            rel = f"recordings/{rec.recording_id}.wav"
            write_wav(rec.signal, directory / rel)
            recordings.append({
                "id": rec.recording_id,
                "room": rec.room,
                "slot": rec.slot,
                "device": rec.device,
                "role": rec.role,
                "path": rel,
            })

        manifest = {
            "format_version": MANIFEST_VERSION,
            "seed": self.seed,
            "sample_rate": self.excitation.sample_rate,
            "excitation": "excitation.wav",
            "sweep": asdict(self.sweep),
            "counts": self.counts(),
            "rooms": [
                {**room.to_dict(), "volume": room.volume, "sabine_rt60": sabine_rt60(room)}
                for room in self.rooms
            ],
            "devices": [device.to_dict() for device in self.devices],
            "recordings": recordings,
            "pairs": [asdict(pair) for pair in self.pairs],
        }
        manifest_path = directory / MANIFEST_NAME
        manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
        logger.info(f"Wrote {len(recordings)} recordings and {len(self.pairs)} pairs to {directory}")
        return manifest_path

    @classmethod
    def load(cls, directory: str | os.PathLike) -> Dataset:
        directory = Path(directory)
        manifest_path = directory / MANIFEST_NAME
        if not manifest_path.exists():
            raise ConfigError(f"{directory} has no {MANIFEST_NAME}")
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("format_version") != MANIFEST_VERSION:
            raise ConfigError(f"unsupported manifest version {manifest.get('format_version')!r}")

        excitation = read_wav(directory / manifest["excitation"])
        recordings = {
            entry["id"]: Recording(
                entry["id"], entry["room"], entry["slot"], entry["device"], entry["role"],
                read_wav(directory / entry["path"]),
            )
            for entry in manifest["recordings"]
        }
        pairs = [RecordingPair(**entry) for entry in manifest["pairs"]]
        rooms = tuple(
            RoomModel.from_dict({k: v for k, v in room.items() if k not in ("volume", "sabine_rt60")})
            for room in manifest.get("rooms", [])
        )
        devices = tuple(
            DeviceProfile(**{**d, "snr_db": math.inf if d["snr_db"] is None else d["snr_db"]})
            for d in manifest.get("devices", [])
        )
        return cls(excitation, SweepSpec(**manifest["sweep"]), recordings, pairs, manifest["seed"], rooms, devices)


def _random_direction(rng: np.random.Generator) -> np.ndarray:
    angle = rng.uniform(0.0, 2 * np.pi)
    return np.array([np.cos(angle), np.sin(angle), 0.0])


def room_layout(room: RoomModel, config: DatasetConfig, room_index: int, location: int) -> list[Placement]:
    """Speaker plus one placement per device; device 0 is the emitting party's own microphone."""
    rng = np.random.default_rng(derive_seed(config.seed, room_index, location, _GEOMETRY_KEY))
    lx, ly, lz = room.dimensions
    # Rooms are checked by DatasetConfig, so the margin always exceeds the radius.
    margin = min(config.copresence_radius + WALL_CLEARANCE, LAYOUT_WALL_FRACTION * min(lx, ly))
    speaker = np.array([
        rng.uniform(margin, lx - margin),
        rng.uniform(margin, ly - margin),
        rng.uniform(SPEAKER_HEIGHT[0], min(SPEAKER_HEIGHT[1], lz - CEILING_CLEARANCE)),
    ])
    placements = [Placement(tuple(speaker), tuple(speaker + config.emitter_distance * _random_direction(rng)))]
    for _ in range(config.devices_per_room - 1):
        distance = rng.uniform(0.4 * config.copresence_radius, config.copresence_radius)
        placements.append(Placement(tuple(speaker), tuple(speaker + distance * _random_direction(rng))))
    return placements


def generate_dataset(config: DatasetConfig, n_jobs: int = 1) -> Dataset:
    """Simulate every room/slot/device recording and enumerate benign and attack pairs.

    Benign pairs join distinct devices of one room in one slot. Attack pairs
    join devices of two different rooms in the same slot, where both rooms
    played the identical clip. Results do not depend on ``n_jobs``.
    """
    with get_tracer().start_as_current_span("simulator.generate_dataset") as span:
        span.set_attribute("doubleecho.rooms", len(config.rooms))
        excitation = generate_sweep(config.sweep)
        pool = device_pool(config.device_pool, config.seed)
        room_devices = [
            [int(d) for d in np.random.default_rng(derive_seed(config.seed, r, _ROOM_DEVICES_KEY)).choice(
                config.device_pool, config.devices_per_room, replace=False)]
            for r in range(len(config.rooms))
        ]

        geometry = [
            (r, loc, k, placement)
            for r, room in enumerate(config.rooms)
            for loc in range(config.locations_per_room)
            for k, placement in enumerate(room_layout(room, config, r, loc))
        ]

        def _rir(task):
            r, loc, k, placement = task
            return (r, loc, k), simulate_rir(config.rooms[r], placement, config.sweep.sample_rate)

        with ThreadPoolExecutor(max_workers=n_jobs) as executor:
            rirs = dict(executor.map(_rir, geometry))
        logger.info(f"Simulated {len(rirs)} room impulse responses")

        tasks = [
            (r, slot, k)
            for r in range(len(config.rooms))
            for slot in range(config.slots_per_room)
            for k in range(config.devices_per_room)
        ]

        def _record(task):
            r, slot, k = task
            rir = rirs[(r, slot // config.sessions_per_room, k)]
            device = pool[room_devices[r][k]]
            signal = render_recording(rir, excitation, device, derive_seed(config.seed, r, slot, k))
            return Recording(_recording_id(r, slot, k), r, slot, room_devices[r][k], "emitter" if k == 0 else "listener", signal)

        with ThreadPoolExecutor(max_workers=n_jobs) as executor:
            recordings = {rec.recording_id: rec for rec in executor.map(_record, tasks)}

        pairs: list[RecordingPair] = []
        for slot in range(config.slots_per_room):
            location = slot // config.sessions_per_room
            for r in range(len(config.rooms)):
                for i, j in itertools.combinations(range(config.devices_per_room), 2):
                    pairs.append(_pair(len(pairs), (r, slot, i), (r, slot, j), COPRESENT, location))
            if config.attack_pairs:
                for r1, r2 in itertools.combinations(range(len(config.rooms)), 2):
                    for i, j in itertools.product(range(config.devices_per_room), repeat=2):
                        pairs.append(_pair(len(pairs), (r1, slot, i), (r2, slot, j), NON_COPRESENT, location))

        dataset = Dataset(excitation, config.sweep, recordings, pairs, config.seed, config.rooms, tuple(pool))
        counts = dataset.counts()
        span.set_attribute("doubleecho.benign_pairs", counts[COPRESENT])
        span.set_attribute("doubleecho.attack_pairs", counts[NON_COPRESENT])
        logger.info(f"Generated {counts[COPRESENT]} benign and {counts[NON_COPRESENT]} attack pairs")
        return dataset


def _recording_id(room: int, slot: int, device_slot: int) -> str:
    return f"room{room:02d}-slot{slot:02d}-dev{device_slot}"


def _pair(index: int, a: tuple[int, int, int], b: tuple[int, int, int], label: Label, location: int) -> RecordingPair:
    return RecordingPair(f"pair{index:06d}", _recording_id(*a), _recording_id(*b), label, a[0], b[0], a[1], location)
