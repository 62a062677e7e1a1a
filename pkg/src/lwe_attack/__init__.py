"""Machine-learning attack on LWE with sparse secrets, at desk scale.

Stages: lattice reduction of LWE sample matrices, training-set assembly, a
transformer trained to predict ``b`` from ``a``, and a distinguisher that turns
the trained model into verified secret guesses.
"""

__version__ = "0.1.0"
