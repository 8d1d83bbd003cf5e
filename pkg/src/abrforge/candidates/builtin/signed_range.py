import numpy as np


def _to_signed(x, scale):
    return 2.0 * np.clip(np.asarray(x, dtype=float) / scale, 0.0, 1.0) - 1.0


def build_state(throughput_history_mbps, download_time_history_s, next_chunk_sizes_bytes,
                buffer_level_s, chunks_remaining, last_bitrate_kbps):
    max_kbps = np.max(BITRATE_LEVELS_KBPS)
    state = np.zeros((6, HISTORY_LEN))
    state[0, -1] = _to_signed(last_bitrate_kbps, max_kbps)
    state[1, -1] = _to_signed(buffer_level_s, 60.0)
    # twice the top bitrate is treated as a saturated link
    state[2, :] = _to_signed(throughput_history_mbps, 2.0 * max_kbps / 1000.0)
    state[3, :] = _to_signed(download_time_history_s, 20.0)
    n = min(len(next_chunk_sizes_bytes), HISTORY_LEN)
    top = max(float(np.max(next_chunk_sizes_bytes)), 1.0)
    state[4, :n] = _to_signed(next_chunk_sizes_bytes[:n], top)
    state[5, -1] = _to_signed(min(chunks_remaining, TOTAL_CHUNKS), float(TOTAL_CHUNKS))
    return state
