"""Runtime-scaling benchmark: NER over synthetic posts in three execution modes.

``centralized`` calls the function directly on pooled data. ``decentralized``
runs the full path: signed request, sealed channel, access control, store
query, record re-verification inside a zero-cost enclave, attestation and
verification at the provider. ``enclave`` adds a fixed setup cost plus a
per-record cost to stand in for real isolation overhead.
"""

from __future__ import annotations

import gc
import json
import statistics
import time
from dataclasses import asdict, dataclass
from functools import partial
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .access import ComputationPolicy, grant
from .agents import DirectTransport, SpController, UserController, handshake
from .analytics import EntityDictionary, ner_count
from .core import DataSelector, OperationKind
from .enclave import EnclaveInstance, OverheadModel, make_bundle
from .identity import generate_identity
from .store import FileDropPlug, PersonalDataStore
from .synth import BRANDS, synthetic_posts

SCHEMA_VERSION = 1
MODES = ("centralized", "decentralized", "enclave")
DEFAULT_SIZES = (100, 200, 400, 800, 1600)
DEFAULT_OVERHEAD = OverheadModel(setup_ms=5.0, per_record_us=50.0)
EPOCH_MS = 1_700_000_000_000


@dataclass(frozen=True)
class BenchRow:
    record_count: int
    mode: str
    runtime_ms: float
    trials: int


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    r2: float


def linear_fit(xs: Sequence[float], ys: Sequence[float]) -> LinearFit:
    """Ordinary least squares ``y = a*x + b`` and its coefficient of determination."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    a, b = np.polyfit(x, y, 1)
    ss_res = float(np.sum((y - (a * x + b)) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return LinearFit(float(a), float(b), r2)


@dataclass
class BenchReport:
    rows: list[BenchRow]
    fits: dict[str, LinearFit]
    overhead: OverheadModel

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "rows": [asdict(r) for r in self.rows],
            "fits": {m: asdict(f) for m, f in self.fits.items()},
            "overhead": asdict(self.overhead),
        }

    def median(self, mode: str, size: int) -> float:
        for r in self.rows:
            if r.mode == mode and r.record_count == size:
                return r.runtime_ms
        raise KeyError((mode, size))

    def write(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def write_plot_data(self, path: Union[str, Path]) -> None:
        lines = ["# mode\trecord_count\truntime_ms"]
        lines += [f"{r.mode}\t{r.record_count}\t{r.runtime_ms:.6f}" for r in self.rows]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


class _Pipeline:
    """One user agent holding ``size`` posts and one provider allowed to run NER on them."""

    def __init__(self, posts: list[dict], overhead: OverheadModel, seed: int):
        clock = lambda: EPOCH_MS  # noqa: E731
        sp_id = generate_identity(seed.to_bytes(32, "big"))
        user_id = generate_identity((seed + 1).to_bytes(32, "big"))
        self.bundle = make_bundle("ner-brands", "ner.v1", sp_id.did, entities=list(BRANDS))
        vault = PersonalDataStore(user_id.did, seed=(seed + 2).to_bytes(32, "big"))
        vault.add_source("posts", "post.v1", "bench", ComputationPolicy(frozenset({"ner-brands"}), len(posts), 10**9),
                         plug=FileDropPlug())
        vault.ingest("posts", posts, EPOCH_MS)
        vault.policy = grant(vault.policy, sp_id.did, "posts", OperationKind.COMPUTE, now=EPOCH_MS)
        enclave = EnclaveInstance(seed=(seed + 3).to_bytes(32, "big"), overhead=overhead)
        enclave.load_bundle(self.bundle)
        self.uc = UserController(user_id, vault, enclave, clock=clock)
        self.sp = SpController(sp_id, [self.bundle], seed=seed, clock=clock)
        handshake(self.sp, self.uc)
        self.transport = DirectTransport()
        self.transport.add(self.uc)
        self.selector = DataSelector("posts", "post.v1", len(posts))

    def run(self) -> dict:
        result = self.sp.request_compute(self.uc.did, "ner-brands", self.selector, {}, self.transport)
        return result.output()


def _time_ms(fn: Callable[[], object]) -> float:
    t0 = time.perf_counter()
    fn()
    return (time.perf_counter() - t0) * 1000.0


def run_bench(
    sizes: Iterable[int] = DEFAULT_SIZES,
    modes: Iterable[str] = MODES,
    trials: int = 7,
    overhead: Optional[OverheadModel] = None,
    seed: int = 0,
) -> BenchReport:
    sizes = sorted(set(int(s) for s in sizes))
    modes = list(modes)
    if len(sizes) < 2:
        raise ValueError("need at least two distinct sizes")
    unknown = set(modes) - set(MODES)
    if unknown:
        raise ValueError(f"unknown modes: {sorted(unknown)}")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    overhead = overhead if overhead is not None else DEFAULT_OVERHEAD
    dictionary = EntityDictionary(BRANDS)
    cells: list[tuple[int, str, Callable[[], object]]] = []
    for size in sizes:
        posts = synthetic_posts(size, seed)
        for mode in modes:
            if mode == "centralized":
                texts = [p["title"] + " " + p["body"] for p in posts]
                fn = partial(ner_count, texts, dictionary)
            else:
                fn = _Pipeline(posts, overhead if mode == "enclave" else OverheadModel(), seed).run
            fn()  # warm-up
            cells.append((size, mode, fn))
    # Trials are interleaved across cells so slow drift in machine load
    # spreads evenly over sizes instead of biasing the largest ones.
    samples: list[list[float]] = [[] for _ in cells]
    for _ in range(trials):
        for i, (_, _, fn) in enumerate(cells):
            gc.collect()
            gc.disable()
            try:
                samples[i].append(_time_ms(fn))
            finally:
                gc.enable()
    rows = [
        BenchRow(size, mode, statistics.median(samples[i]), trials)
        for i, (size, mode, _) in enumerate(cells)
    ]
    fits = {}
    for mode in modes:
        pts = [(r.record_count, r.runtime_ms) for r in rows if r.mode == mode]
        fits[mode] = linear_fit([p[0] for p in pts], [p[1] for p in pts])
    return BenchReport(rows, fits, overhead)
