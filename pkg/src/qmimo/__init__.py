"""Channel estimation and estimation-theoretic bounds for massive MIMO
receivers that quantize with two-threshold ADCs (ternary and parallel
one-bit), plus a Monte Carlo experiment harness and CLI.

Modules:
    numerics      - special functions, truncated-Gaussian statistics
    signal_model  - system configuration, constellations, scene generation
    quantizers    - two-threshold quantizer family and threshold selection
    bounds        - likelihoods, Fisher information, CRLB variants
    estimators    - ML, EM-family and variational channel estimators
    harness       - Monte Carlo sweep engine and metrics
    cli           - command-line front end
"""

__version__ = "0.1.0"
