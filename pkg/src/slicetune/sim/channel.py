"""Downlink rate model: log-distance pathloss plus block lognormal shadowing.

Transmit power is spread evenly over the whole carrier, so the SNR seen on a
PRB does not depend on how many PRBs a UE receives and the rate is exactly
linear in the PRB count.
"""

from __future__ import annotations

import math

import numpy as np

from .config import RadioParams, SimConfig


def pathloss_db(distance_m, radio: RadioParams):
    d_km = np.asarray(distance_m, dtype=float) / 1000.0
    return radio.pathloss_intercept_db + radio.pathloss_slope_db * np.log10(d_km)


def snr_db(distance_m, fading_db, config: SimConfig):
    """Per-PRB SNR in dB."""
    radio = config.radio
    prb_power_dbm = radio.tx_power_dbm - 10.0 * math.log10(config.total_prbs)
    noise_dbm = (
        radio.noise_density_dbm_hz
        + 10.0 * math.log10(config.prb_bandwidth)
        + radio.noise_figure_db
    )
    rx_dbm = prb_power_dbm + radio.antenna_gain_db - pathloss_db(distance_m, radio) + fading_db
    return rx_dbm - noise_dbm


def bits_per_prb(distance_m, fading_db, config: SimConfig):
    """Bits one PRB carries in one TTI."""
    snr = 10.0 ** (np.asarray(snr_db(distance_m, fading_db, config)) / 10.0)
    efficiency = np.minimum(config.radio.efficiency_cap, np.log2(1.0 + snr))
    return config.prb_bandwidth * config.tti * efficiency


def fading_trace(rng: np.random.Generator, n_ttis: int, radio: RadioParams) -> np.ndarray:
    """Shadowing in dB, one draw per coherence block, expanded to TTIs."""
    n_blocks = -(-n_ttis // radio.coherence_ttis)
    blocks = rng.normal(0.0, radio.shadowing_sigma_db, size=n_blocks)
    return np.repeat(blocks, radio.coherence_ttis)[:n_ttis]


def link_rate(ue, prbs_for_ue: int, t_tti: int, config: SimConfig) -> float:
    """Bits delivered to ``ue`` in TTI ``t_tti`` over ``prbs_for_ue`` PRBs."""
    if prbs_for_ue < 0:
        raise ValueError("prbs_for_ue must be >= 0")
    if prbs_for_ue == 0:
        return 0.0
    fading = float(ue.fading_db[t_tti]) if ue.fading_db is not None else 0.0
    return prbs_for_ue * float(bits_per_prb(ue.position, fading, config))
