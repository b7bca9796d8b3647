"""Simulation-based structural estimation toolkit.

Train a shallow neural net on model-simulated (parameter, moments) pairs to
estimate econometric-model parameters together with their statistical
accuracy, and benchmark against GMM/SMM, smoothed simulated maximum
likelihood, indirect inference, and lasso-polynomial learners on an AR(1)
process and a sequential consumer-search model.
"""

__version__ = "0.1.0"
