"""Lattice-sequential conditional Gaussian embedding simulation.

Each coefficient carries an implicit zero-mean Gaussian whose variance comes
from its embedding pmf.  Lattices are processed in order; a coefficient's pmf
is recomputed from the Gaussian conditioned on the latent values already drawn
for its correlated neighbours in earlier lattices.  The change is sampled from
that pmf and a latent value consistent with the change is drawn for later
lattices to condition on.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import special

from . import rng
from .costmap import (InfeasiblePayloadError, probabilities_from_costs, ternary_entropy,
                      variance_map)
from .covmodel import CorrelationModel
from .lattice import N_LATTICES, NeighborTable, Schedule, build_schedule, load_neighbor_tables

VAR_FLOOR_REL = 1e-12
P_FLOOR = 1e-12
PSD_EPS_REL = 1e-9
MAX_REJECTION = 64
FALLBACK_DRAW = MAX_REJECTION + 1


class ScheduleViolation(RuntimeError):
    """A neighbour was needed before it had been embedded (a bug, not bad input)."""


# --------------------------------------------------------------------------
# local covariance and conditioning


def repair_psd(S, eps_rel=PSD_EPS_REL):
    """Clip eigenvalues at ``eps_rel * max(diag)`` and restore the original diagonal.

    Returns the input unchanged when it is already safely positive definite.
    """
    S = np.asarray(S, dtype=float)
    d = np.diag(S).copy()
    if S.shape[0] <= 1 or not np.any(d > 0):
        return S
    eps = eps_rel * d.max()
    w, V = np.linalg.eigh(S)
    if w.min() >= eps:
        return S
    T = (V * np.maximum(w, eps)) @ V.T
    scale = np.sqrt(np.where(d > 0, d / np.diag(T), 0.0))
    out = T * np.outer(scale, scale)
    np.fill_diagonal(out, d)
    return 0.5 * (out + out.T)


@dataclass
class LocalCovariance:
    """Covariance of (target, neighbours...); index 0 is the target."""
    matrix: np.ndarray

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def build_sigma(self_var, neighbor_vars, rhos, neighbor_rhos=None) -> LocalCovariance:
    """Assemble and, if needed, repair the local covariance.

    ``rhos[j]`` correlates the target with neighbour ``j``; ``neighbor_rhos``
    (optional, ``(n-1, n-1)``) correlates neighbours among themselves.
    """
    nv = np.atleast_1d(np.asarray(neighbor_vars, dtype=float))
    rhos = np.atleast_1d(np.asarray(rhos, dtype=float))
    if nv.shape != rhos.shape:
        raise ValueError(f"{len(nv)} neighbour variances but {len(rhos)} correlations")
    if self_var < 0 or np.any(nv < 0):
        raise ValueError("variances must be non-negative")
    if np.any(np.abs(rhos) > 1):
        raise ValueError("correlations must lie in [-1, 1]")
    n = len(nv) + 1
    R = np.eye(n)
    R[0, 1:] = R[1:, 0] = rhos
    if neighbor_rhos is not None:
        NR = np.asarray(neighbor_rhos, dtype=float)
        if NR.shape != (n - 1, n - 1):
            raise ValueError(f"neighbour correlation matrix must be {(n - 1, n - 1)}, got {NR.shape}")
        R[1:, 1:] = NR
        np.fill_diagonal(R, 1.0)
    s = np.sqrt(np.concatenate([[float(self_var)], nv]))
    return LocalCovariance(repair_psd(R * np.outer(s, s)))


@dataclass
class ConditionalGaussian:
    mean: float
    var: float


def _drop_most_collinear(A, keep):
    w, V = np.linalg.eigh(A[np.ix_(keep, keep)])
    j = int(np.argmax(np.abs(V[:, 0])))
    return np.delete(keep, j)


def regression_weights(A, b):
    """Solve ``A w = b`` for SPD ``A``; drops the most collinear variable until Cholesky succeeds.

    Dropped variables get weight 0.
    """
    keep = np.arange(len(b))
    w = np.zeros(len(b))
    while len(keep):
        try:
            L = np.linalg.cholesky(A[np.ix_(keep, keep)])
        except np.linalg.LinAlgError:
            keep = _drop_most_collinear(A, keep)
            continue
        y = np.linalg.solve(L, b[keep])
        w[keep] = np.linalg.solve(L.T, y)
        break
    return w


def conditional_gaussian(sigma: LocalCovariance, history) -> ConditionalGaussian:
    """Gaussian of the target given neighbour latents (Schur complement)."""
    S = np.asarray(sigma.matrix, dtype=float)
    h = np.atleast_1d(np.asarray(history, dtype=float))
    if len(h) != S.shape[0] - 1:
        raise ValueError(f"history has {len(h)} values for {S.shape[0] - 1} neighbours")
    s11 = float(S[0, 0])
    if len(h) == 0 or s11 <= 0:
        return ConditionalGaussian(0.0, max(s11, 0.0))
    live = np.flatnonzero(np.diag(S)[1:] > VAR_FLOOR_REL * s11)
    w = np.zeros(len(h))
    if len(live):
        A = S[1:, 1:][np.ix_(live, live)]
        w[live] = regression_weights(A, S[0, 1:][live])
    mean = float(w @ h)
    var = s11 - float(S[0, 1:] @ w)
    var = min(max(var, VAR_FLOOR_REL * s11), s11)
    return ConditionalGaussian(mean, var)


# --------------------------------------------------------------------------
# quantized pmf and sampling


def bin_edges(q):
    q = np.asarray(q, dtype=float)
    return -0.5 * q, 0.5 * q


def quantized_pmf(mean, std, q=None) -> np.ndarray:
    """Mass of ``N(mean, std^2)`` on ``]-inf,-q/2]``, ``]-q/2,q/2]``, ``]q/2,inf[``.

    Also callable as ``quantized_pmf(g, q)`` with a :class:`ConditionalGaussian`.
    The largest bin is taken as the complement of the other two, so each pmf
    sums to one.
    """
    if isinstance(mean, ConditionalGaussian):
        mean, std, q = mean.mean, np.sqrt(mean.var), std
    mean, std, q = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (mean, std, q)))
    lo, hi = bin_edges(q)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = (lo - mean) / std
        b = (hi - mean) / std
    pm = special.ndtr(a)
    pp = special.ndtr(-b)
    p0 = np.where(a * b <= 0, special.ndtr(b) - special.ndtr(a),
                  np.abs(special.ndtr(-np.abs(a)) - special.ndtr(-np.abs(b))))
    p = np.stack([pm, p0, pp], axis=-1)
    # degenerate std: all mass on the bin that holds the mean
    zero = ~(std > 0)
    if np.any(zero):
        which = np.where(mean <= lo, 0, np.where(mean <= hi, 1, 2))
        p[zero] = np.eye(3)[which[zero]]
    k = np.argmax(p, axis=-1)
    others = p.sum(axis=-1) - np.take_along_axis(p, k[..., None], axis=-1)[..., 0]
    np.put_along_axis(p, k[..., None], (1.0 - others)[..., None], axis=-1)
    return p


def sample_change(pmf, u) -> np.ndarray:
    """Inverse CDF over the fixed order (-1, 0, +1)."""
    p = np.asarray(pmf, dtype=float)
    u = np.asarray(u, dtype=float)
    return np.where(u < p[..., 0], -1, np.where(u < p[..., 0] + p[..., 1], 0, 1)).astype(np.int8)


def _force_into_bin(x, change, lo, hi):
    x = np.where((change == -1) & (x > lo), lo, x)
    x = np.where((change == 0) & (x <= lo), np.nextafter(lo, np.inf), x)
    x = np.where((change == 0) & (x > hi), hi, x)
    x = np.where((change == 1) & (x <= hi), np.nextafter(hi, np.inf), x)
    return x


def truncated_inverse_cdf(mean, std, change, q, u):
    """Exact draw from ``N(mean, std^2)`` restricted to the bin of ``change``."""
    lo, hi = bin_edges(q)
    a = (lo - mean) / std
    b = (hi - mean) / std
    lu, lu1 = np.log(u), np.log1p(-u)
    # log space throughout: tail masses underflow beyond ~38 standard deviations
    # lower tail: z <= a ; upper tail: z > b ; central: a < z <= b
    z_lower = special.ndtri_exp(lu + special.log_ndtr(a))
    z_upper = -special.ndtri_exp(lu + special.log_ndtr(-b))
    # central bin, parameterised from whichever side keeps precision
    with np.errstate(divide="ignore"):
        left = np.logaddexp(special.log_ndtr(a) + lu1, special.log_ndtr(b) + lu)
        right = np.logaddexp(special.log_ndtr(-b) + lu1, special.log_ndtr(-a) + lu)
    z_mid = np.where(a + b > 0, -special.ndtri_exp(right), special.ndtri_exp(left))
    z = np.where(change == -1, z_lower, np.where(change == 1, z_upper, z_mid))
    x = mean + std * z
    return _force_into_bin(x, change, lo, hi)


def sample_latent(mean, std, change, q, draw):
    """Truncated Gaussian draw inside the bin of ``change``.

    ``draw(k, idx)`` returns uniforms in (0, 1) for attempt ``k`` of the items
    ``idx``.  Rejection sampling for ``MAX_REJECTION`` attempts, then the exact
    inverse-CDF draw for whatever is left.
    """
    mean, std, change, q = np.broadcast_arrays(*(np.asarray(v) for v in (mean, std, change, q)))
    mean = mean.astype(float).ravel()
    std = std.astype(float).ravel()
    change = change.ravel()
    q = q.astype(float).ravel()
    lo, hi = bin_edges(q)
    out = np.empty_like(mean)
    pending = np.arange(len(mean))
    for k in range(1, MAX_REJECTION + 1):
        if not len(pending):
            break
        x = mean[pending] + std[pending] * special.ndtri(draw(k, pending))
        c = change[pending]
        ok = np.where(c == -1, x <= lo[pending], np.where(c == 1, x > hi[pending],
                                                            (x > lo[pending]) & (x <= hi[pending])))
        out[pending[ok]] = x[ok]
        pending = pending[~ok]
    if len(pending):
        out[pending] = truncated_inverse_cdf(mean[pending], std[pending], change[pending], q[pending],
                                             draw(FALLBACK_DRAW, pending))
    return out


# --------------------------------------------------------------------------
# maps and reports


@dataclass
class ChangeMap:
    changes: np.ndarray   # int8 (bh, bw, 8, 8)
    latents: np.ndarray   # float (bh, bw, 8, 8)

    def apply(self, cover):
        from .devpipe import QuantizedDctImage
        stego = cover.coefficients.astype(np.int32) + self.changes
        if stego.max() > 32767 or stego.min() < -32768:
            raise OverflowError("stego coefficient leaves the 16-bit range")
        return QuantizedDctImage(stego.astype(np.int16), cover.qtable.copy())


@dataclass
class EmbedReport:
    H_in: float
    H_out: float
    H_target: float | None
    lam: float | None
    nzac: int
    lattice_entropy_in: list[float]
    lattice_entropy_out: list[float]
    n_plus: int
    n_minus: int
    n_conditioned: int
    seed: int
    runtime_s: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def drop(self) -> float:
        return self.H_in - self.H_out

    def to_dict(self, include_runtime=True):
        d = asdict(self)
        if not include_runtime:
            d.pop("runtime_s")
        return d


@dataclass
class SyncPlan:
    """Model/table-derived quantities shared by every image: one repaired
    correlation template per (lattice, mode)."""
    model: CorrelationModel
    tables: NeighborTable
    templates: dict = field(default_factory=dict)

    def template(self, lattice, mode):
        key = (lattice, tuple(mode))
        if key not in self.templates:
            positions = [((0, 0), tuple(mode))] + [(off, m) for off, m in self.tables.neighbor_offsets(*key)]
            R = self.model.correlation_matrix(positions)
            self.templates[key] = repair_psd(R)
        return self.templates[key]


def _solve_masks(R, masks):
    """Regression weights and residual-variance factor for each distinct active set."""
    r = R[0, 1:]
    A = R[1:, 1:]
    W = np.zeros(masks.shape)
    F = np.ones(len(masks))
    cond = np.zeros(len(masks), dtype=bool)
    for i, m in enumerate(masks):
        idx = np.flatnonzero(m)
        if not len(idx) or not np.any(r[idx]):
            continue
        w = regression_weights(A[np.ix_(idx, idx)], r[idx])
        W[i, idx] = w
        F[i] = min(max(1.0 - float(r[idx] @ w), VAR_FLOOR_REL), 1.0)
        cond[i] = True
    return W, F, cond


def _process_batch(batch, plan, var, std, latents, done, pmf_in, q, seed, bw):
    r, c = batch.mode
    K = len(batch.blocks)
    by, bx = batch.blocks[:, 0], batch.blocks[:, 1]
    s_t = std[by, bx, r, c]
    p_in = pmf_in[by, bx, r, c]
    mean = np.zeros(K)
    sd = s_t.copy()
    pmf = p_in.copy()
    conditioned = np.zeros(K, dtype=bool)
    n_nb = len(batch.nb_modes)
    if batch.lattice > 0 and n_nb:
        R = plan.template(batch.lattice, batch.mode)
        nby = np.where(batch.valid, batch.nb_blocks[..., 0], 0)
        nbx = np.where(batch.valid, batch.nb_blocks[..., 1], 0)
        nr, nc = batch.nb_modes[:, 0], batch.nb_modes[:, 1]
        if not np.all(done[nby, nbx, nr, nc] | ~batch.valid):
            raise ScheduleViolation(f"lattice {batch.lattice} mode {batch.mode}: neighbour not yet embedded")
        s_nb = np.where(batch.valid, std[nby, nbx, nr, nc], 0.0)
        active = batch.valid & (s_nb ** 2 > VAR_FLOOR_REL * (s_t ** 2)[:, None]) & (s_t > 0)[:, None]
        z = np.where(active, latents[nby, nbx, nr, nc] / np.where(active, s_nb, 1.0), 0.0)
        masks, inv = np.unique(active, axis=0, return_inverse=True)
        inv = inv.ravel()
        W, F, cond = _solve_masks(R, masks)
        conditioned = cond[inv]
        if np.any(conditioned):
            k = np.flatnonzero(conditioned)
            mean[k] = s_t[k] * np.einsum("kj,kj->k", W[inv[k]], z[k])
            sd[k] = s_t[k] * np.sqrt(F[inv[k]])
            pmf[k] = quantized_pmf(mean[k], sd[k], q[r, c])
    block_index = by.astype(np.int64) * bw + bx
    mode_index = 8 * r + c
    u0 = rng.uniform(seed, block_index, mode_index, 0)
    change = sample_change(pmf, u0)
    live = np.flatnonzero(s_t > 0)
    lat = np.zeros(K)
    if len(live):
        def draw(k, idx):
            return rng.open_uniform(seed, block_index[live][idx], mode_index, k)
        lat[live] = sample_latent(mean[live], sd[live], change[live], q[r, c], draw)
    change[s_t <= 0] = 0
    return batch, change, lat, pmf, conditioned


def embed_image(cover, pmf_map, var_map, model: CorrelationModel | None, tables: NeighborTable | None = None,
                seed=0, q=None, threads=1, schedule: Schedule | None = None, plan: SyncPlan | None = None,
                H_target=None, lam=None):
    """Synchronized embedding simulation over the eight lattices.

    Returns ``(ChangeMap, EmbedReport, realized_pmf)``.
    """
    t0 = time.perf_counter()
    tables = tables or load_neighbor_tables()
    model = model if model is not None else CorrelationModel()
    bh, bw = cover.blocks_shape
    pmf_map = np.asarray(pmf_map, dtype=float)
    var_map = np.asarray(var_map, dtype=float)
    if pmf_map.shape != (bh, bw, 8, 8, 3) or var_map.shape != (bh, bw, 8, 8):
        raise ValueError("pmf/variance maps are not dimensioned to the cover")
    q = np.asarray(cover.qtable if q is None else q, dtype=float).reshape(8, 8)
    schedule = schedule or build_schedule(bw, bh, tables)
    plan = plan or SyncPlan(model, tables)
    std = np.sqrt(var_map)
    latents = np.zeros((bh, bw, 8, 8))
    done = np.zeros((bh, bw, 8, 8), dtype=bool)
    changes = np.zeros((bh, bw, 8, 8), dtype=np.int8)
    realized = pmf_map.copy()
    conditioned = np.zeros((bh, bw, 8, 8), dtype=bool)
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for lattice_batches in schedule.passes:
            args = [(b, plan, var_map, std, latents, done, pmf_map, q, seed, bw) for b in lattice_batches]
            results = pool.map(lambda a: _process_batch(*a), args) if pool else (_process_batch(*a) for a in args)
            results = list(results)
            # writes after the whole lattice pass: every batch read only earlier lattices
            for batch, change, lat, pmf, cond in results:
                by, bx = batch.blocks[:, 0], batch.blocks[:, 1]
                r, c = batch.mode
                changes[by, bx, r, c] = change
                latents[by, bx, r, c] = lat
                realized[by, bx, r, c] = pmf
                conditioned[by, bx, r, c] = cond
                done[by, bx, r, c] = True
    finally:
        if pool:
            pool.shutdown()
    report = entropy_report(cover, pmf_map, realized, changes, conditioned, seed, H_target, lam)
    report.runtime_s = time.perf_counter() - t0
    return ChangeMap(changes, latents), report, realized


def lattice_index_map(blocks_h, blocks_w) -> np.ndarray:
    from .lattice import lattice_map
    parity = (np.add.outer(np.arange(blocks_h), np.arange(blocks_w)) % 2)
    return lattice_map()[parity]


def entropy_report(cover, pmf_in, pmf_out, changes, conditioned, seed, H_target=None, lam=None) -> EmbedReport:
    nz = cover.nzac()
    if nz == 0:
        raise InfeasiblePayloadError("cover has no nonzero AC coefficients")
    h_in = ternary_entropy(pmf_in)
    h_out = ternary_entropy(pmf_out)
    lat = lattice_index_map(*cover.blocks_shape)
    per_in = [float(h_in[lat == i].mean()) if np.any(lat == i) else 0.0 for i in range(N_LATTICES)]
    per_out = [float(h_out[lat == i].mean()) if np.any(lat == i) else 0.0 for i in range(N_LATTICES)]
    return EmbedReport(
        H_in=float(h_in.sum()) / nz, H_out=float(h_out.sum()) / nz,
        H_target=None if H_target is None else float(H_target), lam=None if lam is None else float(lam),
        nzac=nz, lattice_entropy_in=per_in, lattice_entropy_out=per_out,
        n_plus=int((changes == 1).sum()), n_minus=int((changes == -1).sum()),
        n_conditioned=int(conditioned.sum()), seed=int(seed))


# --------------------------------------------------------------------------
# payload calibration


@dataclass
class Calibration:
    H_in: float
    H_out: float
    report: EmbedReport
    pmf_sync: np.ndarray
    pmf_baseline: np.ndarray
    lam_baseline: float
    change_map: ChangeMap


def synchronized_embed(costs, cover, model, tables=None, H_in=0.3, seed=0, q=None, threads=1,
                       schedule=None, plan=None):
    """Costs at a payload (bits/nzAC) -> pmfs -> synchronized embedding."""
    nz = cover.nzac()
    pmf, sol = probabilities_from_costs(costs, H_in * nz)
    qq = np.asarray(cover.qtable if q is None else q, dtype=float).reshape(8, 8)
    var = variance_map(pmf, qq)
    cmap, report, realized = embed_image(cover, pmf, var, model, tables, seed=seed, q=qq, threads=threads,
                                         schedule=schedule, plan=plan, H_target=H_in, lam=sol.lam)
    return pmf, cmap, report, realized


def calibrate_payload(costs, cover, model, tables=None, H_in=0.3, seed=0, q=None, threads=1,
                      schedule=None, plan=None) -> Calibration:
    """Synchronized embedding at ``H_in`` plus the matching unsynchronized pmfs at ``H_out``."""
    pmf, cmap, report, realized = synchronized_embed(costs, cover, model, tables, H_in, seed, q, threads,
                                                     schedule, plan)
    if report.H_out == report.H_in:
        base, lam = pmf, report.lam
    else:
        base, sol = probabilities_from_costs(costs, report.H_out * report.nzac)
        lam = sol.lam
    return Calibration(report.H_in, report.H_out, report, realized, base, lam, cmap)
