from __future__ import annotations

import numpy as np
import pytest

from trajsplat.errors import ValidationError
from trajsplat.optim.metrics import (
    PSNR_CAP,
    loss_photometric,
    photometric_and_grad,
    psnr,
    ssim,
    ssim_and_grad,
)

from _helpers import central_fd, rel_err


def test_identical_images():
    img = np.random.default_rng(0).uniform(size=(12, 12, 3))
    assert psnr(img, img) == PSNR_CAP
    assert ssim(img, img) == pytest.approx(1.0)
    assert loss_photometric(img, img, 0.2) == pytest.approx(0.0, abs=1e-12)


def test_uniform_offset_psnr():
    a = np.full((8, 8, 3), 0.3)
    assert psnr(a, a + 0.1) == pytest.approx(20.0)


def test_pure_l1():
    a = np.full((8, 8, 3), 0.25)
    assert loss_photometric(a, a * 0 + 0.5, 0.0) == pytest.approx(0.25)


def test_checkerboard_against_inverse():
    yy, xx = np.mgrid[0:16, 0:16]
    board = ((xx + yy) % 2).astype(float)
    assert ssim(board, 1.0 - board) < 0


def test_shape_mismatch():
    with pytest.raises(ValidationError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_ssim_gradient():
    rng = np.random.default_rng(2)
    x, y = rng.uniform(size=(9, 9)), rng.uniform(size=(9, 9))
    _, g = ssim_and_grad(x, y)
    fd = central_fd(lambda p: ssim(p, y), x, 1e-6)
    assert rel_err(g, fd) < 1e-6


def test_photometric_gradient():
    rng = np.random.default_rng(4)
    x, y = rng.uniform(size=(7, 7, 3)), rng.uniform(size=(7, 7, 3))
    _, g = photometric_and_grad(x, y, 0.2)[:2]
    fd = central_fd(lambda p: loss_photometric(p, y, 0.2), x, 1e-7)
    assert rel_err(g, fd) < 1e-5
