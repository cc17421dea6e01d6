"""Dataset generation against the simulator, DFNS persistence and replay.

Every episode derives its own generator from ``(seed, episode)`` and every
sample from ``(seed, episode, sample)``, so generation is reproducible
regardless of worker count.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import geom, mp as mpsel, servo, softsim
from .dataset import Dataset
from .dnet import evaluate_mse
from .errors import ConvergenceError, FormatError, GenerationError, ParameterError

log = logging.getLogger(__name__)

DATA_MAGIC = b"DFNS"
DATA_VERSION = 1
FLAG_UNITS_METERS = 1
MAX_SKIP_FRACTION = 0.05
# largest total grasp offset, as a fraction of the box length
MAX_STRAIN = 0.4


@dataclass
class GenConfig:
    num_configs: int = 20
    shapes_per_config: int = 50
    magnitude_range: Tuple[float, float] = (0.005, 0.04)
    pre_offset_max: float = 0.02
    dims: Tuple[float, float, float] = softsim.DEFAULT_DIMS
    resolution: Tuple[int, int, int] = softsim.DEFAULT_RESOLUTION
    young_modulus: float = 1000.0
    poisson_ratio: float = 0.3
    clamp_face: str = "-x"
    grasp_radius: float = 0.03
    mp_min_x_fraction: float = 0.5
    cloud_size: int = softsim.DEFAULT_CLOUD_SIZE
    cloud_seed: int = 0
    max_step: float = softsim.DEFAULT_MAX_STEP
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.magnitude_range
        if self.num_configs < 1 or self.shapes_per_config < 1:
            raise ParameterError("episode and shape counts must be >= 1")
        if not 0 < lo <= hi or hi + self.pre_offset_max > MAX_STRAIN * max(self.dims):
            raise ParameterError(f"magnitude range {self.magnitude_range} must be positive and, with the "
                                 f"pre-offset, within {MAX_STRAIN} of the box length")
        if self.pre_offset_max < 0:
            raise ParameterError("pre_offset_max must be >= 0")

    @classmethod
    def full_scale(cls, **kw) -> "GenConfig":
        return cls(num_configs=150, shapes_per_config=200, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        for k in ("magnitude_range", "dims", "resolution"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    @property
    def material(self) -> softsim.MaterialParams:
        return softsim.MaterialParams(self.young_modulus, self.poisson_ratio)


def make_clamped_box(cfg: GenConfig) -> softsim.SpringMesh:
    mesh = softsim.build_box(cfg.dims, cfg.resolution, cfg.material)
    return softsim.clamp_face(mesh, cfg.clamp_face)


def random_direction(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def sample_mp(mesh: softsim.SpringMesh, cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    """Uniform-by-area surface point on the free part of the box.

    Faces touching the clamp are excluded and the point must lie beyond
    ``mp_min_x_fraction`` of the length, far enough from the clamp that the
    grasp patch never includes a clamped vertex.
    """
    tris = softsim.boundary_triangles(mesh)
    r = mesh.rest_positions
    a, b, c = r[tris[:, 0]], r[tris[:, 1]], r[tris[:, 2]]
    area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    x_min = r[:, 0].min() + cfg.mp_min_x_fraction * cfg.dims[0]
    ok = np.min(np.stack([a[:, 0], b[:, 0], c[:, 0]]), axis=0) >= x_min - 1e-12
    p = np.where(ok, area, 0.0)
    t = rng.choice(len(tris), p=p / p.sum())
    s1, s2 = math.sqrt(rng.random()), rng.random()
    return (1 - s1) * a[t] + s1 * (1 - s2) * b[t] + s1 * s2 * c[t]


def move_and_solve(mesh, handle, delta, max_step: float, tol: float = softsim.DEFAULT_TOL) -> None:
    """Apply ``delta`` in equal sub-steps no longer than ``max_step``, solving after each."""
    delta = np.asarray(delta, dtype=np.float64)
    n = max(1, int(math.ceil(np.linalg.norm(delta) / max_step - 1e-12)))
    for _ in range(n):
        softsim.move_grasp(mesh, handle, delta / n, max_step=None)
        softsim.solve_equilibrium(mesh, tol=tol)


def episode_rng(seed: int, episode: int, sample: Optional[int] = None) -> np.random.Generator:
    key = [seed, episode] if sample is None else [seed, episode, sample]
    return np.random.default_rng(key)


def sample_draw(cfg: GenConfig, episode: int, sample: int) -> Tuple[np.ndarray, np.ndarray]:
    """(pre_offset, delta) for one sample, drawn from its own sub-seed."""
    rng = episode_rng(cfg.seed, episode, sample)
    pre = random_direction(rng) * rng.uniform(0.0, cfg.pre_offset_max)
    lo, hi = cfg.magnitude_range
    delta = random_direction(rng) * rng.uniform(lo, hi)
    # stored as f32; simulate the rounded value so replay from the file is exact
    return pre, delta.astype(np.float32).astype(np.float64)


def render_sample(base: softsim.SpringMesh, mp: np.ndarray, pre: np.ndarray, delta: np.ndarray,
                  cfg: GenConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Simulate pre-state and post-move state from a fresh copy of ``base``; returns both clouds."""
    mesh = base.copy()
    handle = softsim.grasp(mesh, mp, cfg.grasp_radius)
    if np.any(pre):
        move_and_solve(mesh, handle, pre, cfg.max_step)
    cur = softsim.surface_cloud(mesh, cfg.cloud_size, cfg.cloud_seed).points
    move_and_solve(mesh, handle, delta, cfg.max_step)
    goal = softsim.surface_cloud(mesh, cfg.cloud_size, cfg.cloud_seed).points
    return cur, goal


def _generate_episode(args):
    cfg, ep = args
    base = make_clamped_box(cfg)
    mp = sample_mp(base, cfg, episode_rng(cfg.seed, ep)).astype(np.float32).astype(np.float64)
    rows, skipped = [], 0
    for s in range(cfg.shapes_per_config):
        pre, delta = sample_draw(cfg, ep, s)
        try:
            cur, goal = render_sample(base, mp, pre, delta, cfg)
        except ConvergenceError:
            skipped += 1
            continue
        rows.append((cur, goal, delta, pre))
    return ep, mp, rows, skipped


def generate_dataset(cfg: GenConfig = GenConfig(), workers: int = 1) -> Dataset:
    """Simulate ``num_configs`` episodes of ``shapes_per_config`` single-move samples.

    Sample fields: pre-move cloud as ``current``, post-move cloud as ``goal``,
    the applied displacement as ``delta_p`` and the grasp center as ``mp``.
    """
    jobs = [(cfg, ep) for ep in range(cfg.num_configs)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_generate_episode, jobs))
    else:
        results = [_generate_episode(j) for j in jobs]
    cur, goal, dp, mp, epi, pre = [], [], [], [], [], []
    skipped = 0
    for ep, m, rows, sk in sorted(results, key=lambda r: r[0]):
        skipped += sk
        for c, g, d, p in rows:
            cur.append(c)
            goal.append(g)
            dp.append(d)
            mp.append(m)
            epi.append(ep)
            pre.append(p)
    total = cfg.num_configs * cfg.shapes_per_config
    if skipped > MAX_SKIP_FRACTION * total:
        raise GenerationError(f"{skipped} of {total} samples failed to converge")
    if skipped:
        log.warning("skipped %d of %d samples (solver failure)", skipped, total)
    n = cfg.cloud_size
    ds = Dataset(
        np.asarray(cur, dtype=np.float32).reshape(-1, n, 3),
        np.asarray(goal, dtype=np.float32).reshape(-1, n, 3),
        np.asarray(dp, dtype=np.float32).reshape(-1, 3),
        np.asarray(mp, dtype=np.float32).reshape(-1, 3),
        np.asarray(epi, dtype=np.int64),
        np.asarray(pre, dtype=np.float64).reshape(-1, 3),
        {"gen_config": cfg.to_dict(), "skipped": skipped},
    )
    return ds


def replay_goal(ds: Dataset, i: int, cfg: Optional[GenConfig] = None) -> np.ndarray:
    """Re-simulate sample ``i`` from its recorded pre-state and stored ``delta_p``."""
    cfg = cfg or GenConfig.from_dict(ds.meta["gen_config"])
    if ds.pre_offset is None:
        raise ParameterError("dataset carries no pre-state record; replay needs the generation metadata")
    base = make_clamped_box(cfg)
    _, goal = render_sample(base, ds.mp[i].astype(np.float64), ds.pre_offset[i],
                            ds.delta_p[i].astype(np.float64), cfg)
    return goal


# --- DFNS persistence -----------------------------------------------------------

_HEADER = struct.Struct("<4sIIII")  # magic, version, count, cloud size, flags


def save_dataset(ds: Dataset, path) -> None:
    """Write DFNS: header then per sample ``u32 n``, current, goal, mp, delta_p (f32 LE, meters).

    Generation metadata (episode ids, pre-states, config) goes to a JSON sidecar
    ``<path>.meta.json`` so samples can be replayed.
    """
    path = Path(path)
    n = ds.cloud_size
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATA_MAGIC, DATA_VERSION, len(ds), n, FLAG_UNITS_METERS))
        size = struct.pack("<I", n)
        for i in range(len(ds)):
            fh.write(size)
            fh.write(np.ascontiguousarray(ds.current[i], dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(ds.goal[i], dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(ds.mp[i], dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(ds.delta_p[i], dtype="<f4").tobytes())
    meta = dict(ds.meta)
    meta["episode"] = np.asarray(ds.episode).tolist()
    if ds.pre_offset is not None:
        meta["pre_offset"] = np.asarray(ds.pre_offset).tolist()
    Path(str(path) + ".meta.json").write_text(json.dumps(meta))


def load_dataset(path) -> Dataset:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError("truncated DFNS header", len(data))
    magic, version, count, n, _flags = _HEADER.unpack_from(data, 0)
    if magic != DATA_MAGIC:
        raise FormatError("bad DFNS magic", 0)
    if version != DATA_VERSION:
        raise FormatError(f"unsupported DFNS version {version}", 4)
    rec = 4 + 4 * (6 * n + 6)
    off = _HEADER.size
    cur = np.empty((count, n, 3), dtype=np.float32)
    goal = np.empty_like(cur)
    mp = np.empty((count, 3), dtype=np.float32)
    dp = np.empty_like(mp)
    for i in range(count):
        if off + rec > len(data):
            raise FormatError(f"truncated DFNS payload in sample {i}", min(off, len(data)))
        (ni,) = struct.unpack_from("<I", data, off)
        if ni != n:
            raise FormatError(f"sample {i} declares {ni} points, header says {n}", off)
        arr = np.frombuffer(data, dtype="<f4", count=6 * n + 6, offset=off + 4)
        cur[i] = arr[:3 * n].reshape(n, 3)
        goal[i] = arr[3 * n:6 * n].reshape(n, 3)
        mp[i] = arr[6 * n:6 * n + 3]
        dp[i] = arr[6 * n + 3:]
        off += rec
    if off != len(data):
        raise FormatError("trailing bytes after DFNS payload", off)
    meta, episode, pre = {}, None, None
    side = Path(str(path) + ".meta.json")
    if side.exists():
        meta = json.loads(side.read_text())
        episode = np.asarray(meta.pop("episode"), dtype=np.int64) if "episode" in meta else None
        pre = np.asarray(meta.pop("pre_offset"), dtype=np.float64).reshape(-1, 3) if "pre_offset" in meta else None
    return Dataset(cur, goal, dp, mp, episode, pre, meta)


# --- evaluation -------------------------------------------------------------------

MP_METHODS = ("heuristic", "regression", "ground-truth")
HOLDOUT_SEED_OFFSET = 1000


def holdout_cases(n: int = 20, seed: int = 0, base: Optional[GenConfig] = None) -> Dataset:
    """``n`` fresh episodes with one goal each, seeded apart from the training data."""
    cfg = replace(base or GenConfig(), num_configs=n, shapes_per_config=1, seed=seed + HOLDOUT_SEED_OFFSET)
    return generate_dataset(cfg)


def object_diagonal(cfg: GenConfig) -> float:
    return float(np.linalg.norm(cfg.dims))


def adversarial_mp(cfg: GenConfig) -> np.ndarray:
    """Top-face point 1.5 cells from the clamped face: graspable, but the box barely moves there."""
    mesh = make_clamped_box(cfg)
    r = mesh.rest_positions
    cell = cfg.dims[0] / cfg.resolution[0]
    x = r[:, 0].min() + 1.5 * cell
    return np.array([x, 0.5 * (r[:, 1].min() + r[:, 1].max()), r[:, 2].max()])


def case_setup(cases: Dataset, i: int, cfg: GenConfig):
    """Clamped rest box and the goal cloud of case ``i``, tagged with the rest sampling plan."""
    mesh = make_clamped_box(cfg)
    ids = softsim.surface_cloud(mesh, cfg.cloud_size, cfg.cloud_seed).source_ids
    return mesh, geom.PointCloud(cases.goal[i].astype(np.float64), ids)


@dataclass
class EvalConfig:
    servo: servo.ServoConfig = field(default_factory=servo.ServoConfig)
    methods: Tuple[str, ...] = MP_METHODS
    m: int = mpsel.DEFAULT_M
    trace_dir: Optional[str] = None

    def to_dict(self) -> dict:
        return {"servo": asdict(self.servo), "methods": list(self.methods), "m": self.m, "trace_dir": self.trace_dir}


@dataclass
class EvalRow:
    case: int
    mp_method: str
    mp: np.ndarray
    mp_error_m: float
    mp_error_frac: float
    initial_chamfer_m: float
    final_chamfer_m: float
    iterations: int
    outcome: str


REPORT_COLUMNS = ["case", "mp_method", "mp_x", "mp_y", "mp_z", "mp_error_m", "mp_error_frac",
                  "initial_chamfer_m", "final_chamfer_m", "iterations", "outcome"]


@dataclass
class EvalReport:
    rows: List[EvalRow]
    mse: Dict[str, Tuple[float, float]]  # model -> (train, test) in mm^2
    diagonal: float

    def rows_for(self, method: str) -> List[EvalRow]:
        return [r for r in self.rows if r.mp_method == method]

    def mean_mp_error(self, method: str) -> float:
        errs = [r.mp_error_m for r in self.rows_for(method) if np.isfinite(r.mp_error_m)]
        return float(np.mean(errs)) if errs else float("nan")

    @property
    def mse_ratio(self) -> float:
        """Baseline over DeformerNet final train MSE."""
        if "baseline" not in self.mse or "deformer" not in self.mse:
            return float("nan")
        return self.mse["baseline"][0] / self.mse["deformer"][0]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for r in self.rows:
                w.writerow([r.case, r.mp_method, *(f"{v:.9g}" for v in r.mp), f"{r.mp_error_m:.9g}",
                            f"{r.mp_error_frac:.6g}", f"{r.initial_chamfer_m:.9g}", f"{r.final_chamfer_m:.9g}",
                            r.iterations, r.outcome])

    def mse_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "train_mse_mm2", "test_mse_mm2"])
            for name, (tr, te) in self.mse.items():
                w.writerow([name, f"{tr:.6g}", f"{te:.6g}"])

    def summary(self) -> str:
        lines = [f"cases: {len({r.case for r in self.rows})}, object diagonal {self.diagonal:.4f} m", ""]
        for method in dict.fromkeys(r.mp_method for r in self.rows):
            rows = self.rows_for(method)
            ratio = np.array([r.final_chamfer_m / r.initial_chamfer_m for r in rows if r.initial_chamfer_m > 0])
            err = self.mean_mp_error(method)
            lines.append(f"{method:>12}: mean MP error {err:.4f} m ({err / self.diagonal:.1%} of diagonal), "
                         f"mean chamfer {np.mean([r.initial_chamfer_m for r in rows]):.4f} -> "
                         f"{np.mean([r.final_chamfer_m for r in rows]):.4f} m, "
                         f"final <= 30% of initial in {np.mean(ratio <= 0.3):.0%} of cases")
        if self.mse:
            lines.append("")
            for name, (tr, te) in self.mse.items():
                lines.append(f"{name:>12}: train MSE {tr:.3f} mm2, test MSE {te:.3f} mm2")
            if np.isfinite(self.mse_ratio):
                lines.append(f"baseline / DeformerNet train MSE ratio: {self.mse_ratio:.2f}")
        return "\n".join(lines) + "\n"


def model_mse(model, dataset: Dataset, test_fraction: float = 0.1, seed: int = 0) -> Tuple[float, float]:
    """Inference-mode (train, test) MSE in mm^2 on the episode split used for training."""
    train_idx, test_idx = dataset.episode_split(test_fraction, seed)
    prep = model.prepare(dataset.current, dataset.goal)
    target = np.asarray(dataset.delta_p, dtype=np.float64)
    return (evaluate_mse(model, prep.take(train_idx), target[train_idx]),
            evaluate_mse(model, prep.take(test_idx), target[test_idx]))


def evaluate(models: Mapping[str, object], cases: Dataset, config: EvalConfig = EvalConfig(),
             mse: Optional[Mapping[str, Tuple[float, float]]] = None) -> EvalReport:
    """Servo every case from the rest box with each MP method.

    ``models`` needs ``"deformer"``; ``"mp"`` enables the regression method.
    ``mse`` carries (train, test) MSE per model name for the report.
    """
    if "deformer" not in models:
        raise ParameterError("evaluation needs a trained 'deformer' model")
    cfg = GenConfig.from_dict(cases.meta["gen_config"]) if "gen_config" in cases.meta else GenConfig()
    scfg = replace(config.servo, cloud_size=cfg.cloud_size, seed=cfg.cloud_seed, grasp_radius=cfg.grasp_radius)
    methods = [mth for mth in config.methods if mth != "regression" or models.get("mp") is not None]
    if len(methods) < len(config.methods):
        log.warning("no mp model given; skipping regression MP selection")
    diag = object_diagonal(cfg)
    rows = []
    for case in range(len(cases)):
        truth = cases.mp[case].astype(np.float64)
        for method in methods:
            mesh, goal = case_setup(cases, case, cfg)
            mp_arg = truth if method == "ground-truth" else method
            point, trace = servo.run_full_pipeline(mesh, goal, mp_arg, models, scfg, config.m)
            err = mpsel.mp_error(point, truth)
            rows.append(EvalRow(case, method, point, err, err / diag, trace.initial_chamfer,
                                trace.final_chamfer, len(trace.records) - 1, trace.outcome))
            if config.trace_dir is not None:
                Path(config.trace_dir).mkdir(parents=True, exist_ok=True)
                trace.to_csv(Path(config.trace_dir) / f"case{case:03d}_{method}.csv")
            log.info("case %d %s: mp error %.4f m, chamfer %.4f -> %.4f (%s)", case, method, err,
                     trace.initial_chamfer, trace.final_chamfer, trace.outcome)
    return EvalReport(rows, dict(mse or {}), diag)
