"""Per-clip deformation network: 4D multiresolution hash encoding + MLP.

Maps (Gaussian center, normalized clip time) to additive deltas for center,
rotation, and log scale. The output layer starts at zero so an untrained
field reproduces the static scene exactly. Forward returns a cache that the
analytic backward consumes to produce gradients for the hash tables, the MLP
weights, and optionally the query inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HASH_PRIMES = np.array([1, 2654435761, 805459861, 3674653429], dtype=np.uint64)
_CORNERS = np.array(
    [[(c >> d) & 1 for d in range(4)] for c in range(16)], dtype=np.int64
)  # (16, 4) binary corner offsets of a 4D cell


def time_normalize(frame_index: int, clip) -> float:
    """Map a frame index inside (first, last) to t in [0, 1]; single-frame
    clips sit at the midpoint."""
    first, last = clip
    if not (first <= frame_index <= last):
        raise ValueError(f"frame {frame_index} outside clip [{first}, {last}]")
    if last == first:
        return 0.5
    return (frame_index - first) / float(last - first)


@dataclass
class HashEncoding:
    """Multiresolution hashed feature grid over (x, y, z, t) in [0, 1]^4."""

    levels: int = 8
    features_per_level: int = 2
    log2_table_size: int = 15
    base_resolution: int = 8
    growth: float = 1.5
    tables: list = field(default_factory=list)  # per level (table_size, F)

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("need at least one level")
        self.table_size = 1 << self.log2_table_size
        res = [
            int(np.floor(self.base_resolution * self.growth**l)) for l in range(self.levels)
        ]
        if any(res[i + 1] <= res[i] for i in range(self.levels - 1)):
            raise ValueError("level resolutions must be strictly increasing")
        self.resolutions = res

    def init_tables(self, rng: np.random.Generator, scale: float = 1e-4):
        self.tables = [
            rng.uniform(-scale, scale, size=(self.table_size, self.features_per_level))
            for _ in range(self.levels)
        ]

    @property
    def out_dim(self) -> int:
        return self.levels * self.features_per_level

    def _corners(self, q4: np.ndarray, level: int):
        res = self.resolutions[level]
        scaled = q4 * res
        c0 = np.floor(scaled).astype(np.int64)
        frac = scaled - c0
        coords = c0[:, None, :] + _CORNERS[None, :, :]          # (N, 16, 4)
        h = coords.astype(np.uint64) * HASH_PRIMES[None, None, :]
        idx = h[:, :, 0]
        for d in range(1, 4):
            idx = idx ^ h[:, :, d]
        idx = (idx & np.uint64(self.table_size - 1)).astype(np.int64)
        w = np.where(_CORNERS[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :])
        weights = np.prod(w, axis=-1)                           # (N, 16)
        return idx, weights, frac

    def forward(self, q4: np.ndarray):
        """Encode clamped queries q4 (N, 4) in [0, 1]^4 -> features (N, L*F)."""
        q4 = np.clip(np.asarray(q4, dtype=np.float64), 0.0, 1.0)
        n = q4.shape[0]
        feats = np.empty((n, self.out_dim))
        cache = []
        for l in range(self.levels):
            idx, weights, frac = self._corners(q4, l)
            corner_feats = self.tables[l][idx]                  # (N, 16, F)
            f = self.features_per_level
            feats[:, l * f:(l + 1) * f] = np.sum(weights[:, :, None] * corner_feats, axis=1)
            cache.append((idx, weights, frac, corner_feats))
        return feats, cache

    def backward(self, cache, d_feats: np.ndarray, want_input_grad=False):
        """Gradients for the tables and optionally for the query points."""
        n = d_feats.shape[0]
        f = self.features_per_level
        table_grads = [np.zeros_like(t) for t in self.tables]
        d_q4 = np.zeros((n, 4)) if want_input_grad else None
        for l in range(self.levels):
            idx, weights, frac, corner_feats = cache[l]
            g = d_feats[:, l * f:(l + 1) * f]                   # (N, F)
            np.add.at(table_grads[l], idx, weights[:, :, None] * g[:, None, :])
            if want_input_grad:
                # d(weight)/d(frac_d) = +-(product of the other three factors)
                per_corner = np.einsum("nkf,nf->nk", corner_feats, g)  # (N, 16)
                w4 = np.where(
                    _CORNERS[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :]
                )
                for d in range(4):
                    others = np.prod(np.delete(w4, d, axis=2), axis=2)  # (N, 16)
                    sign = np.where(_CORNERS[None, :, d] == 1, 1.0, -1.0)
                    d_q4[:, d] += self.resolutions[l] * np.sum(per_corner * sign * others, axis=1)
        return table_grads, d_q4


def _mlp_init(rng: np.random.Generator, in_dim, hidden, out_dim, layers=2):
    params = {}
    dims = [in_dim] + [hidden] * layers + [out_dim]
    for i in range(len(dims) - 1):
        fan_in = dims[i]
        bound = np.sqrt(1.0 / fan_in)
        params[f"w{i}"] = rng.uniform(-bound, bound, size=(dims[i + 1], dims[i]))
        params[f"b{i}"] = rng.uniform(-bound, bound, size=dims[i + 1])
    # Zero output layer: deltas start exactly at zero.
    params[f"w{len(dims) - 2}"][:] = 0.0
    params[f"b{len(dims) - 2}"][:] = 0.0
    return params, len(dims) - 1


@dataclass
class DeformationField:
    """Time-conditioned deltas (dx, dr, ds) for one clip's Gaussians."""

    encoding: HashEncoding
    domain_lo: np.ndarray       # (3,) world-space box used to normalize positions
    domain_hi: np.ndarray
    clip_id: int = 0
    hidden: int = 64
    mlp: dict = field(default_factory=dict)
    n_layers: int = 0
    out_dim: int = 10           # 3 + 4 + 3
    zero_init_output: bool = True  # untrained field reproduces the static scene

    @classmethod
    def create(cls, domain_lo, domain_hi, clip_id=0, seed=0, encoding=None, hidden=64):
        rng = np.random.default_rng(seed)
        enc = encoding if encoding is not None else HashEncoding()
        enc.init_tables(rng)
        fld = cls(
            encoding=enc,
            domain_lo=np.asarray(domain_lo, dtype=np.float64),
            domain_hi=np.asarray(domain_hi, dtype=np.float64),
            clip_id=clip_id,
            hidden=hidden,
        )
        fld.mlp, fld.n_layers = _mlp_init(rng, enc.out_dim, hidden, fld.out_dim)
        return fld

    def _normalize(self, positions):
        extent = np.maximum(self.domain_hi - self.domain_lo, 1e-9)
        return (positions - self.domain_lo) / extent, extent

    def forward(self, positions: np.ndarray, t: float):
        """Deltas for all query Gaussians at normalized clip time t.

        Returns ((dx, dr, ds), cache); apply as center+dx, normalize(rot+dr),
        log_scale+ds.
        """
        positions = np.asarray(positions, dtype=np.float64)
        n = positions.shape[0]
        q3, extent = self._normalize(positions)
        q4 = np.concatenate([q3, np.full((n, 1), float(t))], axis=1)
        feats, enc_cache = self.encoding.forward(q4)

        acts = [feats]
        pre = []
        h = feats
        for i in range(self.n_layers):
            zi = h @ self.mlp[f"w{i}"].T + self.mlp[f"b{i}"]
            pre.append(zi)
            h = np.maximum(zi, 0.0) if i < self.n_layers - 1 else zi
            acts.append(h)
        out = acts[-1]
        cache = {
            "acts": acts,
            "pre": pre,
            "enc": enc_cache,
            "q4": q4,
            "extent": extent,
        }
        return (out[:, 0:3], out[:, 3:7], out[:, 7:10]), cache

    def backward(self, cache, d_dx, d_dr, d_ds, want_input_grad=False):
        """Parameter gradients given upstream gradients on the three deltas.

        Returns (param_grads, input_grads) where param_grads maps
        'table_<l>' / 'w<i>' / 'b<i>' to arrays and input_grads is an
        optional (d_positions (N, 3), d_t scalar) pair.
        """
        g = np.concatenate(
            [np.asarray(d_dx), np.asarray(d_dr), np.asarray(d_ds)], axis=1
        )
        grads = {}
        acts, pre = cache["acts"], cache["pre"]
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                g = g * (pre[i] > 0.0)
            grads[f"w{i}"] = g.T @ acts[i]
            grads[f"b{i}"] = g.sum(axis=0)
            g = g @ self.mlp[f"w{i}"]
        table_grads, d_q4 = self.encoding.backward(cache["enc"], g, want_input_grad)
        for l, tg in enumerate(table_grads):
            grads[f"table_{l}"] = tg
        input_grads = None
        if want_input_grad:
            inside = (cache["q4"] > 0.0) & (cache["q4"] < 1.0)
            d_q4 = np.where(inside, d_q4, 0.0)
            d_pos = d_q4[:, :3] / cache["extent"][None, :]
            input_grads = (d_pos, float(np.sum(d_q4[:, 3])))
        return grads, input_grads

    def params(self) -> dict:
        """Live parameter arrays keyed like the gradient dict."""
        out = {f"table_{l}": t for l, t in enumerate(self.encoding.tables)}
        out.update(self.mlp)
        return out

    def copy(self) -> "DeformationField":
        fld = DeformationField(
            encoding=HashEncoding(
                levels=self.encoding.levels,
                features_per_level=self.encoding.features_per_level,
                log2_table_size=self.encoding.log2_table_size,
                base_resolution=self.encoding.base_resolution,
                growth=self.encoding.growth,
            ),
            domain_lo=self.domain_lo.copy(),
            domain_hi=self.domain_hi.copy(),
            clip_id=self.clip_id,
            hidden=self.hidden,
        )
        fld.encoding.tables = [t.copy() for t in self.encoding.tables]
        fld.mlp = {k: v.copy() for k, v in self.mlp.items()}
        fld.n_layers = self.n_layers
        fld.zero_init_output = self.zero_init_output
        return fld
