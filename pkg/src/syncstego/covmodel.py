"""Empirical DCT-coefficient correlations over 2x2 block neighbourhoods.

A neighbourhood sample is the 256-vector of four blocks scanned block by block
(top-left, top-right, bottom-left, bottom-right), modes row-major inside each
block.  Neighbourhoods overlap with a stride of one block.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .lattice import mode_group

DIM = 256
TL, TR, BL, BR = range(4)
CANONICAL_OFFSETS = ((0, 0), (0, 1), (1, 0))
DEFAULT_THRESHOLD = 0.05


class DegenerateDataError(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


def _sl(block):
    return slice(64 * block, 64 * block + 64)


def neighborhood_vectors(coefficients) -> np.ndarray:
    """All overlapping 2x2-block neighbourhoods of a ``(bh, bw, 8, 8)`` plane as ``(N, 256)``."""
    c = np.asarray(coefficients, dtype=np.float64)
    bh, bw = c.shape[:2]
    if bh < 2 or bw < 2:
        raise ValueError(f"need at least 2x2 blocks, got {bh}x{bw}")
    flat = c.reshape(bh, bw, 64)
    quads = [flat[:-1, :-1], flat[:-1, 1:], flat[1:, :-1], flat[1:, 1:]]
    return np.concatenate(quads, axis=-1).reshape(-1, DIM)


@dataclass
class CovAccumulator:
    """Mergeable sums for the empirical covariance of neighbourhood vectors."""
    n_samples: int = 0
    total: np.ndarray = field(default_factory=lambda: np.zeros(DIM))
    outer: np.ndarray = field(default_factory=lambda: np.zeros((DIM, DIM)))

    def accumulate(self, dct) -> "CovAccumulator":
        coeffs = getattr(dct, "coefficients", dct)
        x = neighborhood_vectors(coeffs)
        if x.shape[1] != self.total.shape[0]:
            raise ValueError("accumulator dimension mismatch")
        self.n_samples += x.shape[0]
        self.total += x.sum(axis=0)
        self.outer += x.T @ x
        return self

    def merge(self, other: "CovAccumulator") -> "CovAccumulator":
        if other.total.shape != self.total.shape:
            raise ValueError("accumulator dimension mismatch")
        return CovAccumulator(self.n_samples + other.n_samples,
                              self.total + other.total, self.outer + other.outer)

    def covariance(self) -> np.ndarray:
        if self.n_samples < 2:
            raise DegenerateDataError(f"need >= 2 samples, have {self.n_samples}")
        mean = self.total / self.n_samples
        cov = self.outer / self.n_samples - np.outer(mean, mean)
        return 0.5 * (cov + cov.T)


def accumulate(acc: CovAccumulator, dct) -> CovAccumulator:
    return acc.accumulate(dct)


def finalize_correlation(acc: CovAccumulator) -> np.ndarray:
    cov = acc.covariance()
    var = np.diag(cov).copy()
    bad = np.flatnonzero(var <= 1e-12 * max(float(np.abs(var).max()), 1e-300))
    if len(bad):
        raise DegenerateDataError(f"zero variance on coordinate(s) {bad[:8].tolist()}")
    s = np.sqrt(var)
    rho = cov / np.outer(s, s)
    rho = np.clip(0.5 * (rho + rho.T), -1.0, 1.0)
    np.fill_diagonal(rho, 1.0)
    return rho


def fold(corr) -> dict[tuple[int, int], np.ndarray]:
    """Average the symmetric copies of each block relation.

    Returns 64x64 matrices keyed by offset: ``(0,0)`` intra, ``(0,1)``
    horizontal, ``(1,0)`` vertical, ``(1,1)`` and ``(1,-1)`` diagonals.
    Entry ``[a, b]`` is the correlation of mode ``a`` in a block with mode
    ``b`` in the block displaced by the offset.
    """
    R = np.asarray(corr)
    intra = sum(R[_sl(k), _sl(k)] for k in range(4)) / 4.0
    return {
        (0, 0): 0.5 * (intra + intra.T),
        (0, 1): 0.5 * (R[_sl(TL), _sl(TR)] + R[_sl(BL), _sl(BR)]),
        (1, 0): 0.5 * (R[_sl(TL), _sl(BL)] + R[_sl(TR), _sl(BR)]),
        (1, 1): R[_sl(TL), _sl(BR)],
        (1, -1): R[_sl(TR), _sl(BL)],
    }


class CorrelationModel:
    """Sparse correlations keyed by (block offset, mode a, mode b).

    Only canonical offsets are stored; ``rho`` answers reversed offsets by
    closure, ``rho(d, a, b) = rho(-d, b, a)``.  Everything else is zero.
    """

    def __init__(self, threshold=DEFAULT_THRESHOLD, entries=None):
        self.threshold = float(threshold)
        self._dense = {off: np.zeros((64, 64)) for off in CANONICAL_OFFSETS}
        for (off, a, b), rho in (entries or {}).items():
            self.set(off, a, b, rho)

    def set(self, offset, a, b, rho):
        offset = tuple(offset)
        ia, ib = 8 * a[0] + a[1], 8 * b[0] + b[1]
        rho = float(rho)
        if not -1.0 <= rho <= 1.0:
            raise ModelFormatError(f"|rho| > 1 for {offset} {a} {b}")
        if offset == (0, 0):
            if ia == ib:
                raise ModelFormatError(f"self pair {a} at offset (0, 0)")
            self._dense[offset][ia, ib] = self._dense[offset][ib, ia] = rho
        elif offset in self._dense:
            self._dense[offset][ia, ib] = rho
        elif (-offset[0], -offset[1]) in self._dense:
            self._dense[(-offset[0], -offset[1])][ib, ia] = rho
        else:
            raise ModelFormatError(f"offset {offset} is not a 4-connected neighbour")

    def rho(self, offset, a, b) -> float:
        return float(self.dense(offset)[8 * a[0] + a[1], 8 * b[0] + b[1]])

    def dense(self, offset) -> np.ndarray:
        """64x64 correlation between a block and the block at ``offset``."""
        offset = tuple(offset)
        if offset == (0, 0):
            out = self._dense[offset].copy()
            np.fill_diagonal(out, 1.0)
            return out
        if offset in self._dense:
            return self._dense[offset]
        rev = (-offset[0], -offset[1])
        if rev in self._dense:
            return self._dense[rev].T
        return np.zeros((64, 64))

    def entries(self):
        """Canonical entries as ``(offset, mode_a, mode_b, rho)``; intra pairs once with a < b."""
        out = []
        for off in CANONICAL_OFFSETS:
            D = self._dense[off]
            ia, ib = np.nonzero(D)
            for i, j in zip(ia, ib):
                if off == (0, 0) and j <= i:
                    continue
                i, j = int(i), int(j)
                out.append((off, (i // 8, i % 8), (j // 8, j % 8), float(D[i, j])))
        return out

    def __len__(self):
        return len(self.entries())

    def is_empty(self) -> bool:
        return not any(np.any(D) for D in self._dense.values())

    def correlation_matrix(self, positions) -> np.ndarray:
        """Correlation among coefficients given as ``((dy, dx), (r, c))`` positions."""
        n = len(positions)
        R = np.eye(n)
        for i in range(n):
            (pi, mi) = positions[i]
            for j in range(i + 1, n):
                (pj, mj) = positions[j]
                off = (pj[0] - pi[0], pj[1] - pi[1])
                if abs(off[0]) + abs(off[1]) > 1:
                    continue
                R[i, j] = R[j, i] = self.rho(off, mi, mj)
        return R

    def to_dict(self):
        return {
            "threshold": self.threshold,
            "entries": [{"db": list(off), "a": list(a), "b": list(b), "rho": rho}
                        for off, a, b, rho in self.entries()],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d):
        try:
            thr = float(d["threshold"])
            raw = d["entries"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(f"malformed correlation model: {exc}") from exc
        model = cls(thr)
        for e in raw:
            try:
                off, a, b, rho = tuple(e["db"]), tuple(e["a"]), tuple(e["b"]), float(e["rho"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ModelFormatError(f"malformed entry {e!r}") from exc
            if not all(0 <= v < 8 for v in a + b):
                raise ModelFormatError(f"mode out of range in {e!r}")
            if abs(rho) < thr:
                raise ModelFormatError(f"entry below threshold: {e!r}")
            # a pair listed under both closures must agree
            if off not in CANONICAL_OFFSETS and tuple(-v for v in off) in CANONICAL_OFFSETS:
                prev = model.rho(off, a, b)
                if prev and prev != rho:
                    raise ModelFormatError(f"closure violated for {e!r}")
            model.set(off, a, b, rho)
        return model

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"correlation model is not valid JSON: {exc}") from exc
        return cls.from_dict(d)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(fh.read())


def sparsify(corr, threshold=DEFAULT_THRESHOLD) -> CorrelationModel:
    """Keep folded intra/horizontal/vertical correlations with ``|rho| >= threshold``.

    Diagonal-neighbour relations are dropped regardless of magnitude.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    folded = fold(corr)
    model = CorrelationModel(threshold)
    for off in CANONICAL_OFFSETS:
        D = folded[off].copy()
        if off == (0, 0):
            np.fill_diagonal(D, 0.0)
        D[np.abs(D) < threshold] = 0.0
        if off == (0, 0):
            D = np.triu(D, 1)
            D = D + D.T
        model._dense[off] = np.clip(D, -1.0, 1.0)
    return model


def model_from_tables(tables, rho=0.2, threshold=DEFAULT_THRESHOLD, intra_lattices=(1, 2, 3)) -> CorrelationModel:
    """Model on the support of the neighbour tables, every entry set to ``rho``.

    Intra-block pairs come from ``intra_lattices`` only.  The even-parity
    tables (1-3) and odd-parity tables (5-7) list different same-block
    partners for 48 modes; the even-parity lists give the 6-partner pattern
    and match the estimated correlations, so they are the default.  Inter-block
    pairs come from lattices 4-7.
    """
    model = CorrelationModel(threshold)
    for (lat, mode), refs in tables.entries.items():
        for blk, ref in refs:
            if blk == 0 and lat not in intra_lattices:
                continue
            model.set(tables.offsets[blk], mode, ref, rho)
    return model


def default_assignment() -> np.ndarray:
    """Intra-block group (0..3) of each of the 64 modes, row-major."""
    return np.array([mode_group((i // 8, i % 8)) for i in range(64)])


def reorder_to_lattices(corr, assignment=None):
    """Permute the intra-block matrix so groups are contiguous.

    ``corr`` is either the full 256x256 matrix or a 64x64 intra matrix.
    Returns ``(permuted, residual)`` where residual is the largest off-diagonal
    magnitude inside the four 16x16 diagonal blocks.
    """
    R = np.asarray(corr, dtype=float)
    if R.shape == (DIM, DIM):
        R = fold(R)[(0, 0)]
    if R.shape != (64, 64):
        raise ValueError(f"expected a 64x64 or 256x256 matrix, got {R.shape}")
    assignment = default_assignment() if assignment is None else np.asarray(assignment)
    if assignment.shape != (64,) or sorted(np.bincount(assignment, minlength=4).tolist()) != [16] * 4 \
            or assignment.min() < 0 or assignment.max() > 3:
        raise ValueError("assignment must partition the 64 modes into 4 groups of 16")
    perm = np.concatenate([np.flatnonzero(assignment == g) for g in range(4)])
    P = R[np.ix_(perm, perm)]
    residual = 0.0
    for g in range(4):
        blk = P[16 * g:16 * g + 16, 16 * g:16 * g + 16].copy()
        np.fill_diagonal(blk, 0.0)
        residual = max(residual, float(np.abs(blk).max()))
    return P, residual


@dataclass
class StructureReport:
    intra_counts: np.ndarray                    # (64,) partners in the same block
    neighbor_counts: dict[tuple[int, int], np.ndarray]  # offset -> (64,)
    max_diagonal_rho: float | None
    lattice_residual: float
    deviations: list[str]
    canonical_intra: int = 6
    canonical_inter: int = 8

    @property
    def matching_modes(self) -> int:
        ok = self.intra_counts == self.canonical_intra
        for c in self.neighbor_counts.values():
            ok &= c == self.canonical_inter
        return int(ok.sum())

    @property
    def match_fraction(self) -> float:
        return self.matching_modes / 64.0

    @property
    def ok(self) -> bool:
        return not self.deviations

    def to_dict(self):
        return {
            "intra_counts": self.intra_counts.reshape(8, 8).tolist(),
            "neighbor_counts": {f"{dy},{dx}": c.reshape(8, 8).tolist()
                                for (dy, dx), c in self.neighbor_counts.items()},
            "max_diagonal_rho": self.max_diagonal_rho,
            "lattice_residual": self.lattice_residual,
            "matching_modes": self.matching_modes,
            "match_fraction": self.match_fraction,
            "deviations": self.deviations,
        }


def validate_structure(model: CorrelationModel, corr=None, canonical_intra=6, canonical_inter=8) -> StructureReport:
    """Count correlated partners per mode and compare with the canonical pattern.

    ``corr`` (the unsparsified 256x256 matrix) enables the diagonal-block check.
    """
    intra = (model.dense((0, 0)) != 0).sum(axis=1) - 1
    nb = {off: (model.dense(off) != 0).sum(axis=1) for off in ((0, 1), (0, -1), (1, 0), (-1, 0))}
    deviations = []
    if model.is_empty():
        deviations.append("model is empty")
    for i in range(64):
        mode = (i // 8, i % 8)
        if intra[i] != canonical_intra:
            deviations.append(f"mode {mode}: {intra[i]} intra partners (expected {canonical_intra})")
        for off, c in nb.items():
            if c[i] != canonical_inter:
                deviations.append(f"mode {mode}: {c[i]} partners at offset {off} (expected {canonical_inter})")
    max_diag = None
    if corr is not None:
        f = fold(corr)
        max_diag = float(max(np.abs(f[(1, 1)]).max(), np.abs(f[(1, -1)]).max()))
        retained = [abs(r) for *_, r in model.entries()]
        if retained and max_diag >= min(retained):
            deviations.append(f"diagonal-block |rho| {max_diag:.4f} reaches retained minimum {min(retained):.4f}")
    _, residual = reorder_to_lattices(model.dense((0, 0)))
    return StructureReport(intra, nb, max_diag, residual, deviations, canonical_intra, canonical_inter)


def _image_accumulator(args):
    from . import devpipe
    i, size, noise, seed, factor = args
    side = int(np.ceil(size * factor / 2.0)) * 2
    raw = devpipe.synth_raw(side, side, noise, [seed, i])
    gray = devpipe.develop(raw, factor)
    h, w = gray.samples.shape
    y0, x0 = (h - size) // 2, (w - size) // 2
    crop = devpipe.GrayImage(gray.samples[y0:y0 + size, x0:x0 + size])
    return CovAccumulator().accumulate(devpipe.block_dct(crop))


def estimate_correlation(n_images, size=64, noise=None, seed=0, threads=1, downscale_factor=2.0):
    """Develop ``n_images`` constant-luminosity RAW frames and return the 256x256 correlation.

    Image ``i`` draws its noise from ``[seed, i]``, so two campaigns with the
    same seed and different noise levels share their underlying normals.
    Partial sums are merged in image order, so the result does not depend on
    ``threads``.
    """
    from concurrent.futures import ThreadPoolExecutor

    from .devpipe import NoiseParams
    if n_images < 2:
        raise DegenerateDataError(f"need >= 2 samples (images), got {n_images}")
    if size % 8 or size < 16:
        raise ValueError(f"image size must be a multiple of 8 and >= 16, got {size}")
    noise = noise or NoiseParams()
    jobs = [(i, size, noise, seed, downscale_factor) for i in range(n_images)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(_image_accumulator, jobs))
    else:
        parts = [_image_accumulator(j) for j in jobs]
    acc = CovAccumulator()
    for p in parts:
        acc = acc.merge(p)
    return finalize_correlation(acc)


def support(model: CorrelationModel) -> set:
    """Retained (offset, a, b) triples."""
    return {(off, a, b) for off, a, b, _ in model.entries()}


def pattern_agreement(m1: CorrelationModel, m2: CorrelationModel) -> float:
    """Jaccard index of two retained-entry patterns (1.0 when both are empty)."""
    s1, s2 = support(m1), support(m2)
    union = s1 | s2
    return len(s1 & s2) / len(union) if union else 1.0


def table_support_fraction(model: CorrelationModel, tables) -> float:
    """Share of retained entries that also appear in the neighbour tables."""
    ref = support(model_from_tables(tables))
    got = support(model)
    return len(got & ref) / len(got) if got else 1.0
