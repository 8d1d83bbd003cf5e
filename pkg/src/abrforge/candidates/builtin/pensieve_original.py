import numpy as np


def build_state(throughput_history_mbps,   # measured throughput of the last chunks, oldest first (Mbps)
                download_time_history_s,   # download time of the last chunks, oldest first (seconds)
                next_chunk_sizes_bytes,    # size of the next chunk at every bitrate level (bytes)
                buffer_level_s,            # video currently buffered (seconds)
                chunks_remaining,          # chunks left until the end of the video
                last_bitrate_kbps):        # bitrate chosen for the previous chunk (kbps)
    state = np.zeros((6, HISTORY_LEN))
    # scalar features live in the most recent column
    state[0, -1] = last_bitrate_kbps / np.max(BITRATE_LEVELS_KBPS)
    state[1, -1] = buffer_level_s / 10.0
    # Mbps -> megabytes per second
    state[2, :] = throughput_history_mbps / 8.0
    # seconds -> tens of seconds
    state[3, :] = download_time_history_s / 10.0
    n = min(len(next_chunk_sizes_bytes), HISTORY_LEN)
    state[4, :n] = next_chunk_sizes_bytes[:n] / 1e6
    state[5, -1] = min(chunks_remaining, TOTAL_CHUNKS) / float(TOTAL_CHUNKS)
    return state
