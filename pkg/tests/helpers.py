import numpy as np

from swgsim.denoisers import Denoiser


class FixedPredictor(Denoiser):
    """Returns a fixed noise prediction regardless of input."""

    def __init__(self, eps):
        self.eps = np.asarray(eps, dtype=np.float64)
        self.dim = self.eps.shape[-1]

    def predict_noise(self, x, sigma, class_id=None):
        return np.broadcast_to(self.eps, np.shape(x)).copy()

    def denoise(self, x, sigma, class_id=None):
        return np.asarray(x, float) - sigma * self.predict_noise(x, sigma)


class LinearPredictor(Denoiser):
    """eps(x) = A x + b; deterministic and input dependent."""

    def __init__(self, A, b):
        self.A, self.b = np.asarray(A, float), np.asarray(b, float)
        self.dim = self.b.shape[0]

    def predict_noise(self, x, sigma, class_id=None):
        return np.asarray(x, float) @ self.A.T + self.b

    def denoise(self, x, sigma, class_id=None):
        return np.asarray(x, float) - sigma * self.predict_noise(x, sigma)
