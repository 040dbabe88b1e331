"""Classical BCJR/turbo receivers for convolutional neural-network encoders.

Modules
-------
codes     bipolar helpers, polynomial encoders, interleavers, SPC
cnn       1-D circular CNN encoders with hand-written backward pass
analysis  effective-memory estimation (flip and gradient energy)
trellis   trellis construction from polynomial, table or CNN encoders
bcjr      log-MAP / max-log forward-backward with adjoint
turbo     iterative decoding of serial concatenations, differentiable
system    the serially concatenated transmitter and matched receiver
sim       Monte-Carlo BER/BLER harness
tune      training the inner encoder through the receiver
cli       command-line entry point
"""

__version__ = "0.1.0"

from .bcjr import BcjrConfig, decode
from .codes import Interleaver, MultiStreamEncoder, PolynomialEncoder
from .cnn import CnnEncoder, CnnModel, load_weights, random_model, save_weights
from .analysis import estimate_memory, flip_energy, grad_energy
from .trellis import Trellis, build_from_cnn, build_from_polynomial
from .turbo import TurboConfig, TurboTrellises, turbo_decode
from .system import Receiver, ReceiverConfig, SerialCode
from .sim import run_monte_carlo

__all__ = [
    "BcjrConfig", "decode", "Interleaver", "MultiStreamEncoder", "PolynomialEncoder",
    "CnnEncoder", "CnnModel", "load_weights", "random_model", "save_weights",
    "estimate_memory", "flip_energy", "grad_energy", "Trellis", "build_from_cnn",
    "build_from_polynomial", "TurboConfig", "TurboTrellises", "turbo_decode",
    "Receiver", "ReceiverConfig", "SerialCode", "run_monte_carlo",
]
