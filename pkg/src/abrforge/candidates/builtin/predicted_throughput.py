import numpy as np


def build_state(throughput_history_mbps, download_time_history_s, next_chunk_sizes_bytes,
                buffer_level_s, chunks_remaining, last_bitrate_kbps):
    state = np.zeros((7, HISTORY_LEN))
    state[0, -1] = last_bitrate_kbps / np.max(BITRATE_LEVELS_KBPS)
    state[1, -1] = buffer_level_s / 10.0
    state[2, :] = throughput_history_mbps / 8.0
    state[3, :] = download_time_history_s / 10.0
    n = min(len(next_chunk_sizes_bytes), HISTORY_LEN)
    state[4, :n] = next_chunk_sizes_bytes[:n] / 1e6
    state[5, -1] = min(chunks_remaining, TOTAL_CHUNKS) / float(TOTAL_CHUNKS)
    # harmonic mean of the last five measurements as the throughput forecast
    recent = throughput_history_mbps[-5:]
    recent = recent[recent > 0]
    forecast = len(recent) / np.sum(1.0 / recent) if recent.size else 0.0
    state[6, -1] = forecast / (np.max(BITRATE_LEVELS_KBPS) / 1000.0) / 2.0
    return state
