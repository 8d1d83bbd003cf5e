import numpy as np


def _trend(values):
    """Slope and one-step-ahead prediction of a least-squares line over the observed history."""
    observed = values[values > 0]
    if observed.size < 2:
        last = float(observed[-1]) if observed.size else 0.0
        return 0.0, last
    x = np.arange(observed.size, dtype=float)
    slope, intercept = np.polyfit(x, observed, 1)
    return float(slope), float(intercept + slope * observed.size)


def build_state(throughput_history_mbps, download_time_history_s, next_chunk_sizes_bytes,
                buffer_level_s, chunks_remaining, last_bitrate_kbps):
    state = np.zeros((8, HISTORY_LEN))
    state[0, -1] = last_bitrate_kbps / np.max(BITRATE_LEVELS_KBPS)
    state[1, -1] = buffer_level_s / 10.0
    state[2, :] = throughput_history_mbps / 8.0
    state[3, :] = download_time_history_s / 10.0
    n = min(len(next_chunk_sizes_bytes), HISTORY_LEN)
    state[4, :n] = next_chunk_sizes_bytes[:n] / 1e6
    state[5, -1] = min(chunks_remaining, TOTAL_CHUNKS) / float(TOTAL_CHUNKS)

    thr_slope, thr_pred = _trend(throughput_history_mbps)
    dl_slope, _ = _trend(download_time_history_s)
    state[6, 0] = np.tanh(thr_slope / 8.0)
    state[6, 1] = np.tanh(dl_slope / 10.0)
    # predicted download time of the next chunk at each level, capped at one minute
    rate_bytes = max(thr_pred, 0.05) * 1e6 / 8.0
    state[7, :n] = np.minimum(next_chunk_sizes_bytes[:n] / rate_bytes, 60.0) / 10.0
    return state
