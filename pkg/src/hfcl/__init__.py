"""Hybrid federated/centralized learning over noisy, bandwidth-limited links."""

from .channel import LinkSpec, NoiseBudget, aggregate, perturb, quantize
from .comms import LinkBudget, OverheadLedger, allocate_bandwidth, overhead_cl, overhead_fl, overhead_hfcl
from .data import Dataset, Partition, load_idx, partition, synth_classification
from .estimator import HFCLClassifier
from .exceptions import ConfigurationError, DataFormatError, DegenerateModelError, HFCLError, NumericError
from .model import ModelArch
from .schemes import ClientSpec, SchemeConfig, SchemeResult, make_clients, run_scheme

__version__ = "0.1.0"
