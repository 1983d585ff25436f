"""Eight-lattice decomposition of DCT coefficients and the conditioning tables.

A coefficient at block ``(by, bx)`` and mode ``(r, c)`` belongs to lattice
``g + 4 * parity`` where ``g = ((c - r) mod 8) // 2`` is the intra-block mode
group and ``parity = (bx + by) mod 2`` splits the block grid into a
checkerboard.  Coefficients inside one lattice are mutually uncorrelated, so
they can be embedded independently once all earlier lattices are fixed.

The table of which earlier coefficients condition each mode ships as a text
asset (``data/neighbor_tables.txt``); nothing here hardcodes its entries.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

N_LATTICES = 8
LATTICE_COUNTS = (0, 2, 4, 6, 32, 34, 36, 38)
FOUR_NEIGHBOURS = {(-1, 0), (0, -1), (0, 1), (1, 0)}

Mode = tuple[int, int]


def mode_group(mode) -> int:
    r, c = mode
    return ((c - r) % 8) // 2


def lattice_of(block_x, block_y, mode) -> int:
    r, c = mode
    if not (0 <= r < 8 and 0 <= c < 8):
        raise ValueError(f"invalid mode {mode}")
    g = mode_group(mode)
    return g if (block_x + block_y) % 2 == 0 else g + 4


def lattice_modes(lattice) -> list[Mode]:
    """The 16 modes of a lattice, in row-major order."""
    g = lattice % 4
    return [(r, c) for r in range(8) for c in range(8) if mode_group((r, c)) == g]


def lattice_map() -> np.ndarray:
    """``(2, 8, 8)`` array: lattice id per (parity, r, c)."""
    out = np.empty((2, 8, 8), dtype=np.int8)
    for r in range(8):
        for c in range(8):
            g = mode_group((r, c))
            out[0, r, c] = g
            out[1, r, c] = g + 4
    return out


class TableValidationError(ValueError):
    def __init__(self, issues):
        self.issues = list(issues)
        super().__init__("; ".join(str(i) for i in self.issues[:10])
                         + (f" (+{len(self.issues) - 10} more)" if len(self.issues) > 10 else ""))


@dataclass(frozen=True)
class Issue:
    message: str
    lattice: int | None = None
    mode: Mode | None = None
    block: int | None = None
    line: int | None = None

    def __str__(self):
        loc = []
        if self.line is not None:
            loc.append(f"line {self.line}")
        if self.lattice is not None:
            loc.append(f"lattice {self.lattice}")
        if self.mode is not None:
            loc.append(f"mode ({self.mode[0]},{self.mode[1]})")
        if self.block is not None:
            loc.append(f"block {self.block}")
        return f"[{', '.join(loc)}] {self.message}" if loc else self.message


@dataclass
class NeighborTable:
    """Conditioning neighbours per (lattice, mode).

    ``entries[(lattice, mode)]`` is an ordered list of ``(block_ref, mode)``;
    ``offsets[block_ref]`` gives the ``(dy, dx)`` block displacement.
    """
    offsets: dict[int, tuple[int, int]]
    entries: dict[tuple[int, Mode], list[tuple[int, Mode]]]
    suspect: dict[tuple[int, Mode], list[tuple[int, Mode]]] = field(default_factory=dict)
    checksum_ok: bool = True
    mode_order: dict[int, list[Mode]] = field(default_factory=dict)

    def neighbors(self, lattice, mode) -> list[tuple[int, Mode]]:
        return self.entries.get((lattice, tuple(mode)), [])

    def neighbor_offsets(self, lattice, mode) -> list[tuple[tuple[int, int], Mode]]:
        return [(self.offsets[b], m) for b, m in self.neighbors(lattice, mode)]

    def modes(self, lattice) -> list[Mode]:
        return self.mode_order.get(lattice) or lattice_modes(lattice)

    def counts(self) -> list[int]:
        """Per-lattice neighbour count (max over its modes)."""
        return [max((len(self.neighbors(lat, m)) for m in lattice_modes(lat)), default=0)
                for lat in range(N_LATTICES)]

    def validate(self):
        issues = validate_tables(self)
        if issues:
            raise TableValidationError(issues)
        return self


_LINE = re.compile(r"^(X\s+)?L(\d)\s+(\d),(\d)\s+B(\d):\s*(.*)$")
_PAIR = re.compile(r"^(\d),(\d)$")


def _default_asset_text() -> str:
    return resources.files("syncstego").joinpath("data/neighbor_tables.txt").read_text()


def parse_neighbor_tables(text: str) -> tuple[NeighborTable, list[Issue]]:
    """Parse the asset; returns the table and any syntax/checksum issues."""
    issues = []
    offsets = {}
    entries: dict = {}
    suspect: dict = {}
    order: dict[int, list[Mode]] = {}
    body_lines = []
    digest = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("sha256 "):
            digest = line.split()[1]
            continue
        body_lines.append(raw)
        if not line or line.startswith("#"):
            continue
        if line.startswith("blockref"):
            parts = line.split()
            try:
                offsets[int(parts[1])] = (int(parts[2]), int(parts[3]))
            except (IndexError, ValueError):
                issues.append(Issue(f"malformed blockref line: {line!r}", line=lineno))
            continue
        m = _LINE.match(line)
        if not m:
            issues.append(Issue(f"unparseable line: {line!r}", line=lineno))
            continue
        lat, mode, blk = int(m.group(2)), (int(m.group(3)), int(m.group(4))), int(m.group(5))
        refs = []
        for tok in m.group(6).split():
            pm = _PAIR.match(tok)
            if not pm:
                issues.append(Issue(f"bad mode token {tok!r}", lat, mode, blk, lineno))
                continue
            refs.append((blk, (int(pm.group(1)), int(pm.group(2)))))
        target = suspect if m.group(1) else entries
        target.setdefault((lat, mode), []).extend(refs)
        if not m.group(1) and mode not in order.setdefault(lat, []):
            order[lat].append(mode)
    checksum_ok = True
    body = "\n".join(body_lines) + "\n"
    if digest is None:
        issues.append(Issue("missing sha256 line"))
        checksum_ok = False
    elif hashlib.sha256(body.encode()).hexdigest() != digest:
        checksum_ok = False
    table = NeighborTable(offsets, entries, suspect, checksum_ok, order)
    return table, issues


def validate_tables(table: NeighborTable) -> list[Issue]:
    """Structural checks against the per-lattice counts; empty list means valid."""
    issues = []
    if table.offsets.get(0) != (0, 0):
        issues.append(Issue("block ref 0 must map to offset (0, 0)"))
    inter = {b: o for b, o in table.offsets.items() if b != 0}
    if set(inter.values()) != FOUR_NEIGHBOURS or len(inter) != 4:
        issues.append(Issue(f"block refs 1..4 must map onto the four 4-connected offsets, got {inter}"))
    for lat in range(N_LATTICES):
        expected_modes = set(lattice_modes(lat))
        listed = {m for (l, m) in table.entries if l == lat}
        for m in sorted(listed - expected_modes):
            issues.append(Issue("mode does not belong to this lattice", lat, m))
        parity = lat // 4
        n_intra = 2 * (lat % 4)
        for mode in sorted(expected_modes):
            refs = table.neighbors(lat, mode)
            if len(refs) != LATTICE_COUNTS[lat]:
                issues.append(Issue(f"expected {LATTICE_COUNTS[lat]} correlated coefficients, found {len(refs)}",
                                    lat, mode))
            per_block: dict[int, int] = {}
            seen = set()
            for blk, ref in refs:
                per_block[blk] = per_block.get(blk, 0) + 1
                if (blk, ref) in seen:
                    issues.append(Issue(f"duplicate entry {ref}", lat, mode, blk))
                seen.add((blk, ref))
                if blk not in table.offsets:
                    issues.append(Issue("unknown block ref", lat, mode, blk))
                    continue
                if not (0 <= ref[0] < 8 and 0 <= ref[1] < 8):
                    issues.append(Issue(f"invalid referenced mode {ref}", lat, mode, blk))
                    continue
                ref_parity = parity if blk == 0 else 1 - parity
                ref_lat = mode_group(ref) + 4 * ref_parity
                if ref_lat >= lat:
                    issues.append(Issue(f"references {ref} in lattice {ref_lat}, not an earlier lattice",
                                        lat, mode, blk))
            if per_block.get(0, 0) != n_intra:
                issues.append(Issue(f"expected {n_intra} intra-block entries, found {per_block.get(0, 0)}",
                                    lat, mode, 0))
            for blk in (1, 2, 3, 4):
                want = 8 if lat >= 4 else 0
                if per_block.get(blk, 0) != want:
                    issues.append(Issue(f"expected {want} entries, found {per_block.get(blk, 0)}",
                                        lat, mode, blk))
    if not table.checksum_ok:
        issues.append(Issue("asset checksum mismatch"))
    return issues


def load_neighbor_tables(asset: str | None = None, validate=True) -> NeighborTable:
    """Load and (by default) validate the neighbour tables.

    ``asset`` is either asset text or a filesystem path; ``None`` loads the
    shipped transcription.
    """
    if asset is None:
        text = _default_asset_text()
    elif "\n" in asset:
        text = asset
    else:
        with open(asset) as fh:
            text = fh.read()
    table, issues = parse_neighbor_tables(text)
    if validate:
        issues = issues + validate_tables(table)
        if issues:
            raise TableValidationError(issues)
    return table


@dataclass
class ModeBatch:
    """All coefficients of one (lattice, mode) and their conditioning neighbours.

    ``nb_blocks[k, j]`` is the (by, bx) of neighbour ``j`` of block ``k``;
    ``valid[k, j]`` is False where that neighbour falls outside the image.
    """
    lattice: int
    mode: Mode
    blocks: np.ndarray          # (K, 2) as (by, bx)
    nb_offsets: np.ndarray      # (n-1, 2)
    nb_modes: np.ndarray        # (n-1, 2)
    nb_blocks: np.ndarray       # (K, n-1, 2)
    valid: np.ndarray           # (K, n-1) bool


@dataclass
class Schedule:
    blocks_h: int
    blocks_w: int
    passes: list[list[ModeBatch]]

    def __iter__(self):
        return iter(self.passes)

    def neighbors_of(self, by, bx, mode) -> list[tuple[tuple[int, int], Mode]]:
        """Truncated neighbour list of one coefficient as ((by, bx), mode) pairs."""
        lat = lattice_of(bx, by, mode)
        for batch in self.passes[lat]:
            if batch.mode != tuple(mode):
                continue
            k = np.flatnonzero((batch.blocks[:, 0] == by) & (batch.blocks[:, 1] == bx))
            if not len(k):
                break
            k = k[0]
            return [(tuple(int(v) for v in batch.nb_blocks[k, j]), tuple(int(v) for v in batch.nb_modes[j]))
                    for j in np.flatnonzero(batch.valid[k])]
        raise KeyError((by, bx, mode))


def build_schedule(blocks_w, blocks_h, tables: NeighborTable | None = None) -> Schedule:
    """Lattice-ordered iteration plan with border-truncated neighbour lists."""
    if blocks_w < 1 or blocks_h < 1:
        raise ValueError("block grid must be at least 1x1")
    tables = tables or load_neighbor_tables()
    yy, xx = np.indices((blocks_h, blocks_w))
    by, bx = yy.ravel(), xx.ravel()
    passes = []
    for lat in range(N_LATTICES):
        sel = (by + bx) % 2 == lat // 4
        blocks = np.stack([by[sel], bx[sel]], axis=1)
        batches = []
        for mode in tables.modes(lat):
            nbs = tables.neighbor_offsets(lat, mode)
            offs = np.array([o for o, _ in nbs], dtype=np.int64).reshape(-1, 2)
            modes = np.array([m for _, m in nbs], dtype=np.int64).reshape(-1, 2)
            nb_blocks = blocks[:, None, :] + offs[None, :, :]
            valid = ((nb_blocks[..., 0] >= 0) & (nb_blocks[..., 0] < blocks_h)
                     & (nb_blocks[..., 1] >= 0) & (nb_blocks[..., 1] < blocks_w))
            batches.append(ModeBatch(lat, tuple(mode), blocks, offs, modes, nb_blocks, valid))
        passes.append(batches)
    return Schedule(blocks_h, blocks_w, passes)
