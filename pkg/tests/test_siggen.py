import math

import numpy as np
import pytest
from scipy import stats

from amtidin.siggen import (
    ABSENT_INTERFERENCE,
    DEFAULT_PAIRING,
    AuditError,
    ChannelKind,
    ChannelModel,
    ConfigError,
    GenConfig,
    InterferenceType as I,
    ModulationType as M,
    apply_channel,
    audit_record,
    channel_counts,
    constellation,
    generate_dataset,
    negative_record,
    positive_record,
    record_seed,
    scale_to_snr,
    synth_interference,
    synth_modulated,
)

CFG = GenConfig(n=256)


def power(z):
    return float(np.mean(np.abs(z) ** 2))


@pytest.mark.parametrize("m", [m for m in M if m != M.UNMOD])
def test_modulated_unit_power(m):
    x = synth_modulated(m, 256, CFG, seed=7)
    assert x.shape == (256,) and np.iscomplexobj(x)
    assert power(x) == pytest.approx(1.0, rel=1e-9)


@pytest.mark.parametrize("itype", list(I))
def test_interference_unit_power(itype):
    m = DEFAULT_PAIRING[itype][0]
    assert power(synth_interference(itype, m, 256, CFG, seed=3)) == pytest.approx(1.0, rel=1e-9)


def test_bpsk_symbols_follow_constellation_sign():
    # Long RRC pulses peak at symbol centres, so +1 symbols give positive real samples there.
    x = synth_modulated(M.BPSK, 256, CFG, seed=0, symbols=np.zeros(64, dtype=int))
    y = synth_modulated(M.BPSK, 256, CFG, seed=0, symbols=np.ones(64, dtype=int))
    np.testing.assert_allclose(x, -y, atol=1e-12)


def test_constellations_unit_energy():
    for m in (M.BPSK, M.QPSK, M.PSK8, M.QAM16, M.QAM64, M.PAM4):
        pts = constellation(m)
        assert np.mean(np.abs(pts) ** 2) == pytest.approx(1.0)


def test_cwi_is_single_tone():
    x = synth_interference(I.CWI, M.UNMOD, 256, CFG, seed=11)
    spec = np.abs(np.fft.fft(x)) ** 2
    assert spec.max() / spec.sum() > 0.999


def test_mti_tone_count():
    x = synth_interference(I.MTI, M.UNMOD, 256, CFG, seed=2)
    spec = np.abs(np.fft.fft(x)) ** 2
    assert np.sum(spec > 1e-6 * spec.max()) == CFG.mti_tones


def test_nni_band_limited():
    x = synth_interference(I.NNI, M.UNMOD, 256, CFG, seed=5)
    spec = np.sort(np.abs(np.fft.fft(x)) ** 2)[::-1]
    # The carrier offset is off-grid, so allow a few bins of leakage around the occupied band.
    width = math.ceil(CFG.nni_bandwidth_frac * 0.5 * 256) + 8
    assert spec[:width].sum() / spec.sum() > 0.95
    assert spec[:width].sum() / spec.sum() < 1.0


def test_invalid_pairing_rejected():
    with pytest.raises(ConfigError):
        synth_interference(I.CWI, M.BPSK, 256, CFG, seed=0)
    with pytest.raises(ConfigError):
        synth_interference(I.DMI, M.UNMOD, 256, CFG, seed=0)


def test_config_validation():
    with pytest.raises(ConfigError):
        GenConfig(n=32).validate()
    with pytest.raises(ConfigError):
        GenConfig(snr_list_db=[]).validate()
    with pytest.raises(ConfigError):
        GenConfig(pairing={}).validate()
    with pytest.raises(ConfigError):
        GenConfig.from_dict({"bogus": 1})


def test_config_roundtrip():
    cfg = GenConfig(n=128, snr_list_db=[-5.0, 5.0], master_seed=9)
    assert GenConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


def test_awgn_channel_is_identity():
    x = synth_modulated(M.QPSK, 128, CFG, seed=1)
    y, g = apply_channel(x, ChannelModel(ChannelKind.AWGN), seed=0)
    assert g == 1.0 and np.array_equal(x, y)


def test_rician_mean_gain():
    k = 4.0
    gains = np.array([apply_channel(np.ones(1), ChannelModel(ChannelKind.RICIAN, k), s)[1] for s in range(4000)])
    assert np.mean(np.abs(gains) ** 2) == pytest.approx(1.0, abs=0.05)
    assert np.mean(gains.real) == pytest.approx(math.sqrt(k / (k + 1)), abs=0.03)


def test_rayleigh_envelope_ks_small():
    g = np.array([apply_channel(np.ones(1), ChannelModel(ChannelKind.RAYLEIGH), s)[1] for s in range(5000)])
    assert stats.kstest(np.abs(g), stats.rayleigh(scale=1 / math.sqrt(2)).cdf).pvalue > 0.01


@pytest.mark.parametrize("snr", [-10.0, 0.0, 17.5])
def test_scale_to_snr_exact_noise_power(snr):
    y = synth_modulated(M.QAM16, 512, CFG, seed=4)
    r, sigma2 = scale_to_snr(y, snr, seed=1)
    assert sigma2 == pytest.approx(power(y) / 10 ** (snr / 10))
    assert power(r - y) == pytest.approx(sigma2, rel=1e-12)


def test_zero_signal_snr_rejected():
    with pytest.raises(ValueError):
        scale_to_snr(np.zeros(8, complex), 0.0, 0)


def test_positive_record_metadata_and_audit():
    rec = positive_record(CFG, I.DMI, M.QPSK, 5.0, ChannelModel(ChannelKind.RAYLEIGH), seed=123)
    assert rec.iq.shape == (2, 256) and rec.iq.dtype == np.float32
    assert rec.noise_variance == 1.0
    report = audit_record(rec)
    assert abs(report["snr_error_db"]) < 1e-9
    assert report["measured_power"] == pytest.approx(report["expected_power"], rel=0.25)


def test_negative_record():
    rec = negative_record(256, seed=4)
    assert rec.presence == 0 and rec.interference == ABSENT_INTERFERENCE and math.isnan(rec.snr_db)
    z = rec.iq[0].astype(float) + 1j * rec.iq[1]
    assert power(z) == pytest.approx(1.0, rel=1e-6)
    with pytest.raises(AuditError):
        audit_record(rec)


def test_audit_detects_mislabel():
    rec = positive_record(CFG, I.CWI, M.UNMOD, 5.0, ChannelModel(ChannelKind.AWGN), seed=1)
    rec.snr_db = 6.0
    with pytest.raises(AuditError):
        audit_record(rec)


def test_channel_counts_largest_remainder():
    assert channel_counts(100, (1 / 3, 1 / 3, 1 / 3)) == [34, 33, 33]
    assert sum(channel_counts(7, (0.5, 0.25, 0.25))) == 7


def test_record_seeds_distinct():
    seeds = {record_seed(0, s, j) for s in range(20) for j in range(50)}
    seeds |= {record_seed(0, 0, j, negative=True) for j in range(1000)}
    assert len(seeds) == 2000


def test_dataset_balance_and_determinism():
    cfg = GenConfig(n=128, samples_per_class=6, snr_list_db=[0.0, 10.0], master_seed=2)
    a, b = generate_dataset(cfg), generate_dataset(cfg)
    strata = len(cfg.strata())
    assert strata == 2 * sum(len(v) for v in DEFAULT_PAIRING.values())
    assert len(a) == 2 * strata * 6
    assert int(a.presence.sum()) == len(a) // 2
    assert a.iq.tobytes() == b.iq.tobytes()
    c = generate_dataset(GenConfig(n=128, samples_per_class=6, snr_list_db=[0.0, 10.0], master_seed=3))
    assert a.iq.tobytes() != c.iq.tobytes()
