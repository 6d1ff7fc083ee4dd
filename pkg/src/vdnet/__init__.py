"""Two-stream detection (ventral mask, dorsal detector) at desk scale.

A small classifier's input sensitivity turns into a binary attention mask
(``ventral``); a one-stage anchor detector runs on the masked images
(``dorsal``). Everything is built on the numpy autodiff engine in ``tensor``.
"""

from . import data, dorsal, evaluation, network, tensor, ventral

__all__ = ["data", "dorsal", "evaluation", "network", "tensor", "ventral"]
__version__ = "0.1.0"
