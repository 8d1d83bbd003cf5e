import numpy as np


def build_state(throughput_history_mbps, next_chunk_sizes_bytes, download_time_history_s,
                buffer_level_s, chunks_remaining, last_bitrate_kbps):
    # download-time history and next-chunk sizes are deliberately left out
    state = np.zeros((4, HISTORY_LEN))
    state[0, -1] = last_bitrate_kbps / np.max(BITRATE_LEVELS_KBPS)
    state[1, -1] = buffer_level_s / 10.0
    state[2, :] = throughput_history_mbps / 8.0
    state[3, -1] = min(chunks_remaining, TOTAL_CHUNKS) / float(TOTAL_CHUNKS)
    return state
