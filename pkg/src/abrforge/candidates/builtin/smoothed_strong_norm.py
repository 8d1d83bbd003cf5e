import numpy as np

SMOOTHING = 0.5


def _ema(series):
    out = np.empty_like(series)
    acc = series[0]
    for i, v in enumerate(series):
        acc = SMOOTHING * v + (1.0 - SMOOTHING) * acc
        out[i] = acc
    return out


def build_state(throughput_history_mbps, download_time_history_s, next_chunk_sizes_bytes,
                buffer_level_s, chunks_remaining, last_bitrate_kbps):
    state = np.zeros((6, HISTORY_LEN))
    state[0, -1] = last_bitrate_kbps / np.max(BITRATE_LEVELS_KBPS)
    # normalizers doubled relative to the reference state
    state[1, -1] = buffer_level_s / 20.0
    state[2, :] = _ema(throughput_history_mbps) / 16.0
    state[3, :] = _ema(download_time_history_s) / 20.0
    n = min(len(next_chunk_sizes_bytes), HISTORY_LEN)
    state[4, :n] = next_chunk_sizes_bytes[:n] / 2e6
    state[5, -1] = min(chunks_remaining, TOTAL_CHUNKS) / float(TOTAL_CHUNKS)
    return state
