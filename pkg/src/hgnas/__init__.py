"""Hardware-aware neural architecture search for point-cloud GNNs.

Modules: ``design_space`` (positions, operations, functions), ``kernel``
(numpy autodiff), ``dataset`` (synthetic clouds, OFF import), ``supernet``
(weight-sharing one-shot network), ``device_model`` (analytical latency
oracle), ``predictor`` (GCN latency predictor), ``search`` (two-stage
evolutionary search) and ``cli``.
"""

__version__ = "0.1.0"
