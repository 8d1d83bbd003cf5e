import numpy as np
from scipy.signal import savgol_filter


def build_state(throughput_history_mbps, download_time_history_s, next_chunk_sizes_bytes,
                buffer_level_s, chunks_remaining, last_bitrate_kbps, buffer_history_s):
    state = np.zeros((8, HISTORY_LEN))
    state[0, -1] = last_bitrate_kbps / np.max(BITRATE_LEVELS_KBPS)
    state[1, -1] = buffer_level_s / 10.0
    state[2, :] = throughput_history_mbps / 8.0
    state[3, :] = download_time_history_s / 10.0
    n = min(len(next_chunk_sizes_bytes), HISTORY_LEN)
    state[4, :n] = next_chunk_sizes_bytes[:n] / 1e6
    state[5, -1] = min(chunks_remaining, TOTAL_CHUNKS) / float(TOTAL_CHUNKS)

    window = HISTORY_LEN if HISTORY_LEN % 2 else HISTORY_LEN - 1
    if window >= 3:
        smooth = savgol_filter(buffer_history_s, window, 2)
        slope = savgol_filter(buffer_history_s, window, 2, deriv=1)
    else:
        smooth = np.asarray(buffer_history_s, dtype=float)
        slope = np.gradient(smooth) if smooth.size > 1 else np.zeros_like(smooth)
    state[6, :] = smooth / 60.0
    state[7, :] = np.tanh(slope / 4.0)
    return state
