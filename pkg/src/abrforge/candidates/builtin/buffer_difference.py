import numpy as np


def build_state(throughput_history_mbps, download_time_history_s, next_chunk_sizes_bytes,
                buffer_level_s, chunks_remaining, last_bitrate_kbps, buffer_history_s):
    state = np.zeros((7, HISTORY_LEN))
    state[0, -1] = last_bitrate_kbps / np.max(BITRATE_LEVELS_KBPS)
    state[1, -1] = buffer_level_s / 10.0
    state[2, :] = throughput_history_mbps / 8.0
    state[3, :] = download_time_history_s / 10.0
    n = min(len(next_chunk_sizes_bytes), HISTORY_LEN)
    state[4, :n] = next_chunk_sizes_bytes[:n] / 1e6
    state[5, -1] = min(chunks_remaining, TOTAL_CHUNKS) / float(TOTAL_CHUNKS)
    # change in buffer level between consecutive chunks, in tens of seconds
    state[6, 1:] = np.diff(buffer_history_s) / 10.0
    return state
