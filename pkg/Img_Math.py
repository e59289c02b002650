import numpy as np
from skimage.metrics import structural_similarity

from Geo_Math import ShapeMismatchError


# Reported for identical images instead of +inf
PSNR_CAP_DB = 100.0

# Gaussian window settings: sigma 1.5 truncated at 3.5 sigma gives an 11x11 window
SSIM_SIGMA = 1.5


def _as_image_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 3 or a.shape[2] != 3:
        raise ShapeMismatchError(f"expected H x W x 3 images, got {a.shape}")
    return a, b


def ssim(a, b):
    """
    Windowed structural similarity of two RGB images in [0, 1]

    Args:
        a: H x W x 3 image
        b: H x W x 3 image, same shape as a

    Returns:
        Mean SSIM over channels and windows, in [-1, 1]
    """
    a, b = _as_image_pair(a, b)
    if min(a.shape[0], a.shape[1]) < 11:
        raise ShapeMismatchError(f"SSIM needs images of at least 11x11 pixels, got {a.shape[:2]}")

    return float(structural_similarity(
        a, b,
        data_range=1.0,
        channel_axis=2,
        gaussian_weights=True,
        sigma=SSIM_SIGMA,
        use_sample_covariance=False,
        K1=0.01,
        K2=0.03,
    ))


def psnr(a, b):
    """
    Peak signal-to-noise ratio in dB for unit dynamic range

    Args:
        a: H x W x 3 image
        b: H x W x 3 image, same shape as a

    Returns:
        10 log10(1 / MSE), or PSNR_CAP_DB when the images are identical
    """
    a, b = _as_image_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / mse))
