"""Synthetic labeled IQ records: interference waveform, block fading, AWGN.

Every record draws its randomness from a counter-based seed derived from
``(master_seed, stratum, index)``, so a dataset is bit-identical no matter
in which order (or on how many workers) its records are produced.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import signal as sps_signal

ABSENT_INTERFERENCE = 0xFFFF


class ConfigError(ValueError):
    """Invalid generator configuration."""


class AuditError(ValueError):
    """A record failed its power/SNR audit."""


class ModulationType(enum.IntEnum):
    UNMOD = 0
    BPSK = 1
    QPSK = 2
    PSK8 = 3
    QAM16 = 4
    QAM64 = 5
    PAM4 = 6
    GFSK = 7
    CPFSK = 8
    WBFM = 9
    AMDSB = 10
    AMSSB = 11
    NAM = 12
    PM = 13


class InterferenceType(enum.IntEnum):
    CWI = 0
    NNI = 1
    MTI = 2
    LFMI = 3
    DMI = 4
    AMI = 5


class ChannelKind(enum.IntEnum):
    AWGN = 0
    RAYLEIGH = 1
    RICIAN = 2


M = ModulationType
I = InterferenceType

LINEAR_MODS = (M.BPSK, M.QPSK, M.PSK8, M.QAM16, M.QAM64, M.PAM4)
FSK_MODS = (M.GFSK, M.CPFSK)
ANALOG_MODS = (M.WBFM, M.AMDSB, M.AMSSB, M.NAM, M.PM)
UNMODULATED = (I.CWI, I.NNI, I.MTI, I.LFMI)

DEFAULT_PAIRING: dict[InterferenceType, tuple[ModulationType, ...]] = {
    I.CWI: (M.UNMOD,),
    I.NNI: (M.UNMOD,),
    I.MTI: (M.UNMOD,),
    I.LFMI: (M.UNMOD,),
    I.DMI: LINEAR_MODS + FSK_MODS,
    I.AMI: ANALOG_MODS,
}


@dataclass(frozen=True)
class ChannelModel:
    kind: ChannelKind = ChannelKind.AWGN
    rician_k: float = 4.0


@dataclass
class GenConfig:
    n: int = 256
    samples_per_class: int = 100
    snr_list_db: list[float] = field(default_factory=lambda: [10.0])
    sps: int = 8
    rrc_rolloff: float = 0.35
    mti_tones: int = 5
    nni_bandwidth_frac: float = 0.1
    lfmi_sweep_frac: float = 0.4
    cwi_freq_frac_range: tuple[float, float] = (-0.4, 0.4)
    rician_k: float = 4.0
    channel_mix: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    pairing: dict[InterferenceType, tuple[ModulationType, ...]] = field(
        default_factory=lambda: dict(DEFAULT_PAIRING)
    )
    master_seed: int = 0

    def validate(self) -> "GenConfig":
        if self.n < 64:
            raise ConfigError(f"n must be at least 64, got {self.n}")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be positive")
        if not self.snr_list_db:
            raise ConfigError("snr_list_db is empty")
        if self.sps < 1 or not 0.0 < self.rrc_rolloff <= 1.0:
            raise ConfigError("sps must be >= 1 and rrc_rolloff in (0, 1]")
        if abs(sum(self.channel_mix) - 1.0) > 1e-9 or min(self.channel_mix) < 0:
            raise ConfigError(f"channel_mix must be non-negative and sum to 1, got {self.channel_mix}")
        lo, hi = self.cwi_freq_frac_range
        if not -0.4 <= lo < hi <= 0.4:
            raise ConfigError(f"cwi_freq_frac_range must lie within (-0.4, 0.4), got {self.cwi_freq_frac_range}")
        if not 0 < self.nni_bandwidth_frac <= 1 or not 0 < self.lfmi_sweep_frac <= 1:
            raise ConfigError("bandwidth fractions must lie in (0, 1]")
        if self.mti_tones < 1 or 2 * self.mti_tones > self.n // 2:
            raise ConfigError(f"mti_tones={self.mti_tones} does not fit n={self.n}")
        if self.rician_k <= 0:
            raise ConfigError("rician_k must be positive")
        if not self.pairing:
            raise ConfigError("pairing selects no interference type")
        for itype, mods in self.pairing.items():
            if not mods:
                raise ConfigError(f"pairing for {InterferenceType(itype).name} is empty")
            for m in mods:
                check_pairing(itype, m, self)
        return self

    def strata(self) -> list[tuple[InterferenceType, ModulationType, float]]:
        """``(interference, modulation, snr)`` triples in canonical order."""
        out = []
        for itype in sorted(self.pairing):
            for m in sorted(self.pairing[itype]):
                for snr in self.snr_list_db:
                    out.append((InterferenceType(itype), ModulationType(m), float(snr)))
        return out

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "samples_per_class": self.samples_per_class,
            "snr_list_db": [float(s) for s in self.snr_list_db],
            "sps": self.sps,
            "rrc_rolloff": self.rrc_rolloff,
            "mti_tones": self.mti_tones,
            "nni_bandwidth_frac": self.nni_bandwidth_frac,
            "lfmi_sweep_frac": self.lfmi_sweep_frac,
            "cwi_freq_frac_range": list(self.cwi_freq_frac_range),
            "rician_k": self.rician_k,
            "channel_mix": list(self.channel_mix),
            "pairing": {
                InterferenceType(i).name: [ModulationType(m).name for m in sorted(mods)]
                for i, mods in sorted(self.pairing.items())
            },
            "master_seed": int(self.master_seed),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "GenConfig":
        data = dict(data)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown GenConfig keys: {sorted(unknown)}")
        if "pairing" in data:
            try:
                data["pairing"] = {
                    InterferenceType[i]: tuple(ModulationType[m] for m in mods)
                    for i, mods in data["pairing"].items()
                }
            except KeyError as exc:
                raise ConfigError(f"unknown enum name in pairing: {exc}") from None
        for key in ("cwi_freq_frac_range", "channel_mix"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data).validate()


@dataclass
class SignalRecord:
    iq: np.ndarray
    presence: int
    modulation: ModulationType
    interference: int
    snr_db: float
    realized_signal_power: float
    noise_variance: float
    seed: int
    channel: ChannelKind | None = None


def check_pairing(itype, m, cfg: GenConfig | None = None) -> None:
    itype = InterferenceType(itype)
    m = ModulationType(m)
    if cfg is not None and m not in cfg.pairing.get(itype, ()):
        raise ConfigError(f"{m.name} is not paired with {itype.name} in this configuration")
    if (itype in UNMODULATED) != (m == M.UNMOD):
        raise ConfigError(f"{itype.name} cannot carry modulation {m.name}")
    if itype == I.DMI and m in ANALOG_MODS or itype == I.AMI and m not in ANALOG_MODS:
        raise ConfigError(f"{itype.name} cannot carry modulation {m.name}")


# -- waveform building blocks ------------------------------------------------


def _gray(k: np.ndarray) -> np.ndarray:
    return k ^ (k >> 1)


def _pam_levels(order: int) -> np.ndarray:
    """Gray-labelled PAM levels: entry ``b`` is the amplitude carrying bit label ``b``."""
    levels = np.arange(order) * 2.0 - (order - 1)
    out = np.empty(order)
    out[_gray(np.arange(order))] = levels
    return out


def constellation(m: ModulationType) -> np.ndarray:
    """Gray-mapped unit-average-energy constellation indexed by data value."""
    if m == M.BPSK:
        pts = np.array([1.0, -1.0], dtype=complex)
    elif m == M.PAM4:
        pts = _pam_levels(4).astype(complex)
    elif m in (M.QPSK, M.PSK8):
        order = 4 if m == M.QPSK else 8
        pts = np.empty(order, dtype=complex)
        phase = 2 * np.pi * np.arange(order) / order + (np.pi / 4 if order == 4 else 0.0)
        pts[_gray(np.arange(order))] = np.exp(1j * phase)
    elif m in (M.QAM16, M.QAM64):
        side = 4 if m == M.QAM16 else 8
        bits = int(math.log2(side))
        axis = _pam_levels(side)
        data = np.arange(side * side)
        pts = axis[data >> bits] + 1j * axis[data & (side - 1)]
    else:
        raise ValueError(f"{m.name} has no constellation")
    return pts / np.sqrt(np.mean(np.abs(pts) ** 2))


def rrc_taps(sps: int, rolloff: float, span: int = 8) -> np.ndarray:
    """Root-raised-cosine impulse response, ``span`` symbols long, unit energy."""
    t = np.arange(-span * sps // 2, span * sps // 2 + 1) / sps
    b = rolloff
    h = np.empty_like(t)
    for k, tk in enumerate(t):
        if abs(tk) < 1e-12:
            h[k] = 1.0 - b + 4 * b / np.pi
        elif abs(abs(4 * b * tk) - 1.0) < 1e-9:
            h[k] = b / np.sqrt(2) * ((1 + 2 / np.pi) * np.sin(np.pi / (4 * b)) + (1 - 2 / np.pi) * np.cos(np.pi / (4 * b)))
        else:
            num = np.sin(np.pi * tk * (1 - b)) + 4 * b * tk * np.cos(np.pi * tk * (1 + b))
            h[k] = num / (np.pi * tk * (1 - (4 * b * tk) ** 2))
    return h / np.sqrt(np.sum(h**2))


def _unit_power(x: np.ndarray) -> np.ndarray:
    p = np.mean(np.abs(x) ** 2)
    if not p > 0:
        raise ValueError("waveform has zero power")
    return x / np.sqrt(p)


def _bandlimited_gaussian(rng: np.random.Generator, n: int, bandwidth: float, complex_valued: bool = False) -> np.ndarray:
    """White Gaussian noise masked in frequency to ``|f| <= bandwidth / 2`` cycles/sample, unit variance."""
    w = rng.standard_normal(n) + (1j * rng.standard_normal(n) if complex_valued else 0.0)
    spec = np.fft.fft(w)
    f = np.fft.fftfreq(n)
    spec[np.abs(f) > bandwidth / 2] = 0.0
    x = np.fft.ifft(spec)
    x = x if complex_valued else x.real
    return x / np.sqrt(np.mean(np.abs(x) ** 2))


def synth_modulated(
    m: ModulationType,
    n: int,
    cfg: GenConfig,
    seed,
    symbols: np.ndarray | None = None,
) -> np.ndarray:
    """Unit-average-power complex baseband waveform of modulation ``m``.

    ``symbols`` optionally fixes the data values (linear and FSK families).
    """
    m = ModulationType(m)
    if m == M.UNMOD:
        raise ValueError("UNMOD has no modulated waveform")
    if n < cfg.sps:
        raise ValueError(f"n={n} is shorter than one symbol ({cfg.sps} samples)")
    rng = np.random.default_rng(seed)
    sps = cfg.sps
    if m in LINEAR_MODS:
        pts = constellation(m)
        taps = rrc_taps(sps, cfg.rrc_rolloff)
        span = len(taps) // sps
        n_sym = -(-n // sps) + span
        data = _symbols(rng, symbols, len(pts), n_sym)
        up = np.zeros(n_sym * sps, dtype=complex)
        up[::sps] = pts[data]
        shaped = np.convolve(up, taps)
        start = len(taps) // 2 + (span // 2) * sps
        return _unit_power(shaped[start : start + n])
    if m in FSK_MODS:
        n_sym = -(-n // sps) + 4
        bits = _symbols(rng, symbols, 2, n_sym)
        pulse = np.repeat(2.0 * bits - 1.0, sps)
        if m == M.GFSK:
            bt = 0.35
            t = np.arange(-2 * sps, 2 * sps + 1) / sps
            gauss = np.exp(-2 * (np.pi * bt * t) ** 2 / np.log(2))
            pulse = np.convolve(pulse, gauss / gauss.sum(), mode="same")
        h = 0.5
        phase = np.pi * h * np.cumsum(pulse) / sps + rng.uniform(0, 2 * np.pi)
        return np.exp(1j * phase[2 * sps : 2 * sps + n])
    phi = rng.uniform(0, 2 * np.pi)
    msg = _bandlimited_gaussian(rng, n, 0.05)
    if m == M.WBFM:
        x = np.exp(1j * (phi + 2 * np.pi * 0.05 * np.cumsum(msg)))
    elif m == M.AMDSB:
        x = (1.0 + 0.5 * msg) * np.exp(1j * phi)
    elif m == M.AMSSB:
        x = sps_signal.hilbert(msg) * np.exp(1j * phi)
    elif m == M.NAM:
        f0 = rng.uniform(-0.1, 0.1)
        amp = 1.0 + 0.3 * _bandlimited_gaussian(rng, n, 0.25)
        x = amp * np.exp(1j * (2 * np.pi * f0 * np.arange(n) + phi))
    else:  # PM
        x = np.exp(1j * (phi + 0.5 * np.pi * msg))
    return _unit_power(x)


def _symbols(rng, symbols, order, count) -> np.ndarray:
    if symbols is None:
        return rng.integers(0, order, size=count)
    symbols = np.asarray(symbols, dtype=np.int64)
    if symbols.min(initial=0) < 0 or symbols.max(initial=0) >= order:
        raise ValueError(f"symbols must lie in [0, {order})")
    return np.resize(symbols, count)


def synth_interference(
    i: InterferenceType,
    m: ModulationType,
    n: int,
    cfg: GenConfig,
    seed,
) -> np.ndarray:
    """Unit-average-power interference waveform of family ``i``."""
    i = InterferenceType(i)
    check_pairing(i, m, cfg)
    if i in (I.DMI, I.AMI):
        return synth_modulated(m, n, cfg, seed)
    rng = np.random.default_rng(seed)
    k = np.arange(n)
    if i == I.CWI:
        lo, hi = cfg.cwi_freq_frac_range
        # Whole FFT bins keep the tone on one bin: f = b / n cycles/sample.
        bins = np.arange(math.ceil(lo * 0.5 * n), math.floor(hi * 0.5 * n) + 1)
        b = rng.choice(bins)
        return np.exp(1j * (2 * np.pi * b * k / n + rng.uniform(0, 2 * np.pi)))
    if i == I.NNI:
        bw = cfg.nni_bandwidth_frac * 0.5
        w = _bandlimited_gaussian(rng, n, bw, complex_valued=True)
        f0 = rng.uniform(-0.4 + bw / 2, 0.4 - bw / 2)
        return _unit_power(w * np.exp(2j * np.pi * f0 * k))
    if i == I.MTI:
        tones = _spaced_bins(rng, n, cfg.mti_tones)
        phases = rng.uniform(0, 2 * np.pi, size=len(tones))
        x = np.exp(1j * (2 * np.pi * np.outer(k, tones) / n + phases)).sum(axis=1)
        return _unit_power(x)
    # LFMI: instantaneous frequency moves linearly across the sweep band.
    sweep = cfg.lfmi_sweep_frac * 0.5
    f_start = rng.uniform(-0.45, 0.45 - sweep)
    if rng.random() < 0.5:
        inst = f_start + sweep * k / n
    else:
        inst = f_start + sweep - sweep * k / n
    phase = 2 * np.pi * np.concatenate(([0.0], np.cumsum(inst[:-1]))) + rng.uniform(0, 2 * np.pi)
    return np.exp(1j * phase)


def _spaced_bins(rng: np.random.Generator, n: int, count: int) -> np.ndarray:
    """Distinct FFT bins within +/-0.4 cycles/sample, pairwise at least 2 bins apart."""
    limit = int(0.4 * n)
    candidates = np.arange(-limit, limit + 1)
    chosen: list[int] = []
    for b in rng.permutation(candidates):
        if all(abs(b - c) >= 2 for c in chosen):
            chosen.append(int(b))
            if len(chosen) == count:
                break
    return np.array(sorted(chosen))


def apply_channel(x: np.ndarray, ch: ChannelModel, seed) -> tuple[np.ndarray, complex]:
    """Block fading ``y = g x``; noise is added separately."""
    if not np.all(np.isfinite(x)):
        raise ValueError("channel input is not finite")
    if ch.kind == ChannelKind.AWGN:
        return x.copy(), 1.0 + 0.0j
    rng = np.random.default_rng(seed)
    scatter = (rng.standard_normal() + 1j * rng.standard_normal()) / np.sqrt(2)
    if ch.kind == ChannelKind.RAYLEIGH:
        g = scatter
    else:
        k = ch.rician_k
        g = np.sqrt(k / (k + 1)) + np.sqrt(1 / (k + 1)) * scatter
    return g * x, complex(g)


def scale_to_snr(y: np.ndarray, snr_db: float, seed) -> tuple[np.ndarray, float]:
    """Add complex white Gaussian noise of variance ``P / 10^(snr/10)``.

    The drawn noise is rescaled so its empirical power equals the target
    variance exactly, which makes the realized SNR of every record equal to
    its label.
    """
    p = float(np.mean(np.abs(y) ** 2))
    if not p > 0:
        raise ValueError("cannot set an SNR for a zero-power signal")
    sigma2 = p / 10 ** (snr_db / 10)
    noise = _complex_noise(np.random.default_rng(seed), len(y), sigma2)
    return y + noise, sigma2


def _complex_noise(rng: np.random.Generator, n: int, power: float) -> np.ndarray:
    w = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    return w * np.sqrt(power / np.mean(np.abs(w) ** 2))


# -- dataset assembly -------------------------------------------------------


def record_seed(master_seed: int, stratum: int, index: int, negative: bool = False) -> int:
    """64-bit per-record seed from a counter-based hash."""
    key = [master_seed, 1, index] if negative else [master_seed, 0, stratum, index]
    return int(np.random.SeedSequence(key).generate_state(1, np.uint64)[0])


def channel_counts(total: int, mix: tuple[float, float, float]) -> list[int]:
    """Largest-remainder split of ``total`` records over the channel models."""
    raw = [total * f for f in mix]
    counts = [int(math.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda k: (-(raw[k] - counts[k]), k))
    for k in order[: total - sum(counts)]:
        counts[k] += 1
    return counts


def positive_record(
    cfg: GenConfig,
    itype: InterferenceType,
    m: ModulationType,
    snr_db: float,
    channel: ChannelModel,
    seed: int,
) -> SignalRecord:
    """One present-interference record, scaled to a unit noise floor."""
    s_wave, s_chan, s_noise = np.random.SeedSequence(seed).spawn(3)
    x = synth_interference(itype, m, cfg.n, cfg, s_wave)
    y, _ = apply_channel(x, channel, s_chan)
    r, sigma2 = scale_to_snr(y, snr_db, s_noise)
    scale = 1.0 / np.sqrt(sigma2)
    power = float(np.mean(np.abs(y) ** 2)) / sigma2
    return SignalRecord(
        iq=_to_iq(r * scale),
        presence=1,
        modulation=m,
        interference=int(itype),
        snr_db=float(snr_db),
        realized_signal_power=power,
        noise_variance=1.0,
        seed=seed,
        channel=channel.kind,
    )


def negative_record(n: int, seed: int) -> SignalRecord:
    """Pure unit-variance complex Gaussian noise."""
    w = _complex_noise(np.random.default_rng(seed), n, 1.0)
    return SignalRecord(
        iq=_to_iq(w),
        presence=0,
        modulation=M.UNMOD,
        interference=ABSENT_INTERFERENCE,
        snr_db=float("nan"),
        realized_signal_power=0.0,
        noise_variance=1.0,
        seed=seed,
        channel=None,
    )


def _to_iq(z: np.ndarray) -> np.ndarray:
    return np.stack([z.real, z.imag]).astype(np.float32)


def generate_dataset(cfg: GenConfig):
    """Every configured stratum at ``samples_per_class`` records plus as many noise-only records."""
    from .dataio import Dataset

    cfg.validate()
    kinds = (ChannelKind.AWGN, ChannelKind.RAYLEIGH, ChannelKind.RICIAN)
    counts = channel_counts(cfg.samples_per_class, cfg.channel_mix)
    records: list[SignalRecord] = []
    for s_idx, (itype, m, snr) in enumerate(cfg.strata()):
        j = 0
        for kind, count in zip(kinds, counts):
            ch = ChannelModel(kind, cfg.rician_k)
            for _ in range(count):
                seed = record_seed(cfg.master_seed, s_idx, j)
                records.append(positive_record(cfg, itype, m, snr, ch, seed))
                j += 1
    n_pos = len(records)
    for j in range(n_pos):
        records.append(negative_record(cfg.n, record_seed(cfg.master_seed, 0, j, negative=True)))
    return Dataset.from_records(records, cfg.n, gen_config=cfg.to_dict())


def audit_record(rec: SignalRecord, tol_db: float = 0.3) -> dict:
    """Recompute SNR and power statistics of a present record from its metadata."""
    if rec.presence != 1:
        raise AuditError("audit needs a record with interference present")
    sigma2 = float(rec.noise_variance)
    p = float(rec.realized_signal_power)
    if not sigma2 > 0:
        raise AuditError(f"noise variance must be positive, got {sigma2}")
    if not p > 0:
        raise AuditError(f"signal power must be positive, got {p}")
    snr = 10 * math.log10(p / sigma2)
    z = rec.iq[0].astype(np.float64) + 1j * rec.iq[1].astype(np.float64)
    inst = np.abs(z) ** 2
    measured = float(inst.mean())
    report = {
        "audit_snr_db": snr,
        "labeled_snr_db": float(rec.snr_db),
        "snr_error_db": snr - float(rec.snr_db),
        "signal_power": p,
        "noise_variance": sigma2,
        "measured_power": measured,
        "expected_power": p + sigma2,
        "peak_power": float(inst.max()),
        "papr_db": 10 * math.log10(inst.max() / measured),
    }
    if not abs(report["snr_error_db"]) <= tol_db:
        raise AuditError(f"realized SNR {snr:.3f} dB deviates from label {rec.snr_db:.3f} dB")
    return report
