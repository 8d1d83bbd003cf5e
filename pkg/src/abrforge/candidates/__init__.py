from .corpus import (BASELINE_NETWORK, BASELINE_STATE, builtin, load_builtin_corpus,
                     load_corpus_dir, save_corpus_dir)
from .design import CandidateDesign, StatusError
from .sandbox import (CandidateFailure, PolicyHandle, SandboxPolicy, StateProgram,
                      execute_state, execute_state_many, instantiate_network, probe_network)

__all__ = [
    "BASELINE_NETWORK", "BASELINE_STATE", "CandidateDesign", "CandidateFailure", "PolicyHandle",
    "SandboxPolicy", "StateProgram", "StatusError", "builtin", "execute_state",
    "execute_state_many", "instantiate_network", "load_builtin_corpus", "load_corpus_dir",
    "probe_network", "save_corpus_dir",
]
