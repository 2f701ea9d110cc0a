"""Euler-Maruyama simulation of path-dependent diffusions and drifted laws.

Randomness comes from counter-style streams: paths are grouped in fixed
blocks of :data:`BLOCK` and each block draws its normals step-major from a
generator seeded by ``(seed, block)``.  The increment of path ``p`` at step
``k`` is therefore a pure function of ``(seed, p, k)`` (for fixed ``d``), and
the worker count used to fill blocks cannot change any number.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import product

import numpy as np

from .errors import NumericalError, ValidationError
from .paths import (
    AdaptedFunctional,
    DiscretePath,
    PathEnsemble,
    TimeGrid,
    probe_control_bound,
)
from .regression import RegressionBasis

BLOCK = 1024


@dataclass(frozen=True)
class RngStream:
    seed: int
    path_index: int

    def normals(self, steps: int, d: int = 1) -> np.ndarray:
        """Standard normals for this path, shape ``(steps, d)``."""
        block, offset = divmod(self.path_index, BLOCK)
        return _block_normals(self.seed, block, steps, d)[:, offset, :].copy()


def _block_normals(seed: int, block: int, steps: int, d: int) -> np.ndarray:
    gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(block)])))
    return gen.standard_normal((steps, BLOCK, d))


def gaussian_increments(seed: int, N: int, steps: int, d: int, h: float, threads: int = 1) -> np.ndarray:
    """Driving increments ``sqrt(h) * xi``, shape ``(N, steps, d)``."""
    if N < 1:
        raise ValidationError("N must be >= 1", field="N")
    nblocks = -(-N // BLOCK)
    out = np.empty((N, steps, d))

    def fill(b):
        z = _block_normals(seed, b, steps, d)
        lo = b * BLOCK
        hi = min(N, lo + BLOCK)
        out[lo:hi] = np.transpose(z[:, : hi - lo, :], (1, 0, 2))

    if threads > 1 and nblocks > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill, range(nblocks)))
    else:
        for b in range(nblocks):
            fill(b)
    out *= np.sqrt(h)
    return out


def _check_sigma(sigma: AdaptedFunctional):
    if sigma.role != "sigma":
        raise ValidationError(f"expected a sigma functional, got role {sigma.role!r}", field="sigma")


def _euler(sigma, grid, paths, dW, start, control=None):
    h = grid.h
    for k in range(start, grid.n):
        s = sigma(grid, k, paths)
        bad = ~np.all(np.isfinite(s), axis=(1, 2))
        if np.any(bad):
            p = int(np.argmax(bad))
            raise NumericalError(f"non-finite sigma on path {p} at step {k}", path_index=p, step=k)
        step = dW[:, k]
        if control is not None:
            step = step + control(grid, k, paths) * h
        paths[:, k + 1] = paths[:, k] + np.einsum("nij,nj->ni", s, step)
        bad = ~np.all(np.isfinite(paths[:, k + 1]), axis=1)
        if np.any(bad):
            p = int(np.argmax(bad))
            raise NumericalError(f"non-finite state on path {p} at step {k + 1}", path_index=p, step=k + 1)
    return paths


def simulate_base(sigma: AdaptedFunctional, grid: TimeGrid, N: int, d: int = 1, seed: int = 0, threads: int = 1) -> PathEnsemble:
    """Strong Euler solution of ``dX = sigma(t, X) dB`` under the reference measure."""
    _check_sigma(sigma)
    dW = gaussian_increments(seed, N, grid.n, d, grid.h, threads)
    paths = np.zeros((N, grid.n + 1, d))
    _euler(sigma, grid, paths, dW, 0)
    return PathEnsemble(grid, paths, seed=seed, tag="base", increments=dW, meta={"sigma": sigma.name})


def simulate_drifted(
    sigma: AdaptedFunctional,
    control: AdaptedFunctional,
    grid: TimeGrid,
    N: int,
    d: int = 1,
    seed: int = 0,
    threads: int = 1,
) -> PathEnsemble:
    """Euler scheme for ``dX = sigma (dB + lambda dt)`` with the same noise as :func:`simulate_base`."""
    _check_sigma(sigma)
    if control.role != "control":
        raise ValidationError("expected a control functional", field="control")
    dW = gaussian_increments(seed, N, grid.n, d, grid.h, threads)
    paths = np.zeros((N, grid.n + 1, d))
    # probe the bound on a short pilot batch before paying for the whole run
    pilot = np.zeros((min(N, 64), grid.n + 1, d))
    _euler(sigma, grid, pilot, dW[: pilot.shape[0]], 0, control)
    probe_control_bound(control, grid, pilot)
    _euler(sigma, grid, paths, dW, 0, control)
    return PathEnsemble(
        grid,
        paths,
        seed=seed,
        tag="drifted",
        increments=dW,
        meta={"sigma": sigma.name, "control": control.name, "L": control.bound},
    )


def girsanov_weights(control: AdaptedFunctional, ens: PathEnsemble) -> np.ndarray:
    """Density of the drifted law w.r.t. the base law, one weight per path.

    Accumulated in log space and exponentiated once.
    """
    if ens.tag != "base":
        raise ValidationError("Girsanov weights need a base ensemble")
    if ens.increments is None:
        raise ValidationError("ensemble carries no driving increments")
    probe_control_bound(control, ens.grid, ens.paths)
    h = ens.grid.h
    logw = np.zeros(ens.N)
    for k in range(ens.start, ens.n):
        lam = control(ens.grid, k, ens.paths)
        logw += np.einsum("ni,ni->n", lam, ens.increments[:, k]) - 0.5 * np.einsum("ni,ni->n", lam, lam) * h
    return np.exp(logw)


def conditional_ensemble(
    sigma: AdaptedFunctional,
    prefix: DiscretePath,
    i: int,
    N: int,
    seed: int = 0,
    threads: int = 1,
) -> PathEnsemble:
    """Paths equal to ``prefix`` on ``0..i`` and continued under the shifted coefficient.

    Conditioning on ``F_{t_i}`` is realised by resimulating the suffix with
    ``sigma^{t_i, omega}``, which on the concatenated path is just ``sigma``
    evaluated from index ``i`` on.
    """
    _check_sigma(sigma)
    grid = prefix.grid
    grid.check_index(i)
    if i == grid.n:
        raise ValidationError("nothing to simulate: prefix index equals the horizon")
    d = prefix.d
    suffix_noise = gaussian_increments(seed, N, grid.n - i, d, grid.h, threads)
    dW = np.zeros((N, grid.n, d))
    dW[:, i:] = suffix_noise
    paths = np.zeros((N, grid.n + 1, d))
    paths[:, : i + 1] = prefix.values[: i + 1]
    _euler(sigma, grid, paths, dW, i)
    return PathEnsemble(
        grid,
        paths,
        seed=seed,
        tag="base" if i == 0 else "conditional",
        increments=dW,
        start=i,
        meta={"sigma": sigma.name, "prefix_index": i},
    )


def tree_ensemble(grid: TimeGrid) -> PathEnsemble:
    """All ``2^n`` paths of the symmetric binary walk with steps ``+-sqrt(h)``.

    Path ``p`` goes up at step ``k`` iff bit ``n-1-k`` of ``p`` is set, so paths
    sharing a prefix of length ``k`` form contiguous blocks.
    """
    if grid.n > 16:
        raise ValidationError("tree ensembles are limited to 16 steps")
    signs = np.array(list(product((-1.0, 1.0), repeat=grid.n)))
    dW = signs[:, :, None] * np.sqrt(grid.h)
    paths = np.zeros((signs.shape[0], grid.n + 1, 1))
    paths[:, 1:, 0] = np.cumsum(dW[:, :, 0], axis=1)
    return PathEnsemble(grid, paths, tag="tree", increments=dW, meta={"sigma": "identity"})


def compensated_increment_residual(
    ens: PathEnsemble,
    sigma: AdaptedFunctional,
    control: AdaptedFunctional,
    basis: RegressionBasis | None = None,
) -> np.ndarray:
    """RMS of the regressed conditional mean of ``dX - sigma lambda h``, per step.

    On a drifted ensemble these compensated increments are martingale
    differences, so the fitted conditional means should vanish up to
    regression noise of order ``sqrt(h p / N)``.
    """
    basis = basis or RegressionBasis()
    grid = ens.grid
    out = np.empty(grid.n - ens.start)
    for k in range(ens.start, grid.n):
        s = sigma(grid, k, ens.paths)
        lam = control(grid, k, ens.paths)
        comp = ens.paths[:, k + 1] - ens.paths[:, k] - np.einsum("nij,nj->ni", s, lam) * grid.h
        fit = basis.conditional_mean(ens, k, comp)
        pred = np.asarray(fit.prediction).reshape(ens.N, -1)
        out[k - ens.start] = np.sqrt(ens.mean(np.sum(pred**2, axis=1)))
    return out
