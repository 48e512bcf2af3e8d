"""Recursive operating-space exploration.

Each exploration task samples its cell, fans the stability assessments out
to a shared worker pool, evaluates entropy and the cutoff criteria, picks
split dimensions (fixed list or forest-importance ranking), bisects, and
recurses into the children.  Determinism comes from seed keying on
(seed, cell path, sample index, case index), never from execution order.
"""

from __future__ import annotations

import math
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .feasibility import (FEASIBLE, FeasibilityVerdict, PowerFlowSolution,
                          adjust_to_feasible)
from .forest import (LabeledDataset, SensitivityUnavailableError,
                     feature_importance, train_forest)
from .grid import GridModel
from .sampling import OperatingPoint, hierarchical_sample
from .smallsignal import (EPS_MARGIN, GfolParams, GforParams, LinearizationError,
                          SgParams, StabilityVerdict, build_units, eig_stability,
                          linearize)
from .space import (OperatingSpaceSpec, Subregion, P_IBR, P_SG, contains, split,
                    ToleranceFloorError)

STOP_ZERO_ENTROPY = "zero_entropy"
STOP_ENTROPY_DECREASE = "entropy_decrease"
STOP_MIN_FEASIBLE_RATE = "min_feasible_rate"
STOP_TOLERANCE_FLOOR = "tolerance_floor"
STOP_MAX_DEPTH = "max_depth"


@dataclass
class ExplorationConfig:
    n_samples: int = 333
    n_cases: int = 3
    max_depth: int = 5
    min_feasible_rate: float = 0.05
    entropy_decrease_threshold: float = 0.01
    min_tolerance_frac: float = 0.01
    use_sensitivity: bool = True
    fixed_split_dims: tuple[str, ...] = (P_SG, P_IBR)
    split_dims_per_node: int | None = None  # default: 2 fixed mode, 1 sensitivity
    loss_factor: float = 0.97
    eps_margin: float = EPS_MARGIN
    seed: int = 0
    workers: int = 1
    dev_bound: float = 0.02
    randomize_loads: bool = False
    load_pf: float = 0.98
    record_timing: bool = False
    forest_trees: int = 100
    forest_depth: int = 8
    sg_params: SgParams = field(default_factory=lambda: SgParams(3.5, 2.0))
    gfor_params: GforParams = field(default_factory=GforParams)
    gfol_params: GfolParams = field(default_factory=GfolParams)

    @property
    def dims_per_node(self) -> int:
        if self.split_dims_per_node is not None:
            return self.split_dims_per_node
        return 1 if self.use_sensitivity else 2


@dataclass
class LabeledRecord:
    op: OperatingPoint                 # adjusted operating point
    verdict: FeasibilityVerdict
    stability: StabilityVerdict | None
    cell_path: str
    depth: int
    pf_iterations: int
    assess_ms: float | None


@dataclass
class ExplorationNode:
    cell: Subregion
    records: list[LabeledRecord] = field(default_factory=list)
    n_feasible: int = 0
    n_infeasible: int = 0
    n_discarded: int = 0
    entropy: float = 0.0
    importances: dict[str, float] = field(default_factory=dict)
    stop_reason: str | None = None
    children: list["ExplorationNode"] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return self.cell.depth

    @property
    def n_records(self) -> int:
        return len(self.records)

    @property
    def feasible_rate(self) -> float:
        return self.n_feasible / self.n_records if self.records else 0.0


def entropy(labels: list[bool] | list[int] | np.ndarray) -> float:
    """Binary entropy of the stable/unstable labels, in nats (H(empty) = 0)."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    p = float(np.mean(labels))
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return float(-p * math.log(p) - (1 - p) * math.log(1 - p))


def _candidate_dims(cell: Subregion, space: OperatingSpaceSpec,
                    config: ExplorationConfig) -> list[str]:
    names = ([d.name for d in space.independent] if config.use_sensitivity
             else [d for d in config.fixed_split_dims if d in cell.bounds])
    return [d for d in names
            if not cell.at_tolerance_floor(d, config.min_tolerance_frac)]


def should_stop(node: ExplorationNode, parent_entropy: float | None,
                config: ExplorationConfig, space: OperatingSpaceSpec) -> str | None:
    """First matching cutoff in the fixed order, or None to keep exploring."""
    if node.entropy == 0.0:
        return STOP_ZERO_ENTROPY
    if (parent_entropy is not None
            and parent_entropy - node.entropy < config.entropy_decrease_threshold):
        return STOP_ENTROPY_DECREASE
    if node.feasible_rate < config.min_feasible_rate:
        return STOP_MIN_FEASIBLE_RATE
    if not _candidate_dims(node.cell, space, config):
        return STOP_TOLERANCE_FLOOR
    if node.depth >= config.max_depth:
        return STOP_MAX_DEPTH
    return None


def node_dataset(node: ExplorationNode, space: OperatingSpaceSpec) -> LabeledDataset:
    names = [d.name for d in space.independent]
    rows, labels = [], []
    for r in node.records:
        if r.verdict.status == FEASIBLE and r.stability is not None:
            rows.append([r.op.dim_values[n] for n in names])
            labels.append(int(r.stability.stable))
    return LabeledDataset(np.array(rows).reshape(len(rows), len(names)),
                          np.array(labels, dtype=int), names)


def choose_split_dims(node: ExplorationNode, config: ExplorationConfig,
                      space: OperatingSpaceSpec) -> list[str]:
    """Dimensions to bisect at this node.

    Sensitivity mode ranks the candidates by forest feature importance
    (falling back to the fixed list when no forest is trainable); fixed
    mode uses the configured list.  Ties break by declaration order.
    """
    candidates = _candidate_dims(node.cell, space, config)
    if not candidates:
        return []
    names = [d.name for d in space.independent]
    if config.use_sensitivity:
        try:
            data = node_dataset(node, space)
            model = train_forest(data, config.forest_trees, config.forest_depth,
                                 seed=config.seed)
            imp = feature_importance(model)
            node.importances = dict(zip(names, imp.tolist()))
            ranked = sorted(candidates,
                            key=lambda d: (-imp[names.index(d)], names.index(d)))
            return ranked[:config.dims_per_node]
        except SensitivityUnavailableError:
            pass
    fixed = [d for d in config.fixed_split_dims if d in candidates]
    if not fixed:
        fixed = sorted(candidates, key=names.index)
    return fixed[:config.dims_per_node]


def assess(grid: GridModel, op, cell: Subregion, config: ExplorationConfig,
           depth: int) -> LabeledRecord:
    """Stability assessment of one sampled operating point (pure task)."""
    t0 = time.perf_counter()
    adjusted, sol, verdict = adjust_to_feasible(grid, op, cell,
                                                load_pf=config.load_pf)
    stability: StabilityVerdict | None = None
    if verdict.status == FEASIBLE:
        gfor = config.gfor_params
        gfol = config.gfol_params
        cd = adjusted.dim_values
        if "tau_u" in cd:
            gfor = GforParams(gfor.k_p, gfor.k_q, cd["tau_u"], gfor.tau_w)
            gfol = GfolParams(gfol.pll_kp, gfol.pll_ki, gfol.t_p, gfol.k_f,
                              gfol.k_v, cd["tau_u"], gfol.tau_w)
        if "tau_w" in cd:
            gfor = GforParams(gfor.k_p, gfor.k_q, gfor.tau_u, cd["tau_w"])
            gfol = GfolParams(gfol.pll_kp, gfol.pll_ki, gfol.t_p, gfol.k_f,
                              gfol.k_v, gfol.tau_u, cd["tau_w"])
        load_mw = {ld.bus: adjusted.var_values.get(f"P_L_{ld.bus}", 0.0)
                   for ld in grid.loads}
        try:
            units = build_units(grid, adjusted, config.sg_params, gfor, gfol)
            ssm = linearize(grid, sol, units, load_mw, config.load_pf)
            stability = eig_stability(ssm, config.eps_margin)
        except LinearizationError:
            verdict = FeasibilityVerdict("Infeasible",
                                         [("analysis_failed", 1.0)],
                                         verdict.adjustment_distance)
    ms = (time.perf_counter() - t0) * 1e3
    return LabeledRecord(adjusted, verdict, stability, cell.path, depth,
                         sol.iterations, ms if config.record_timing else None)


class _Progress:
    def __init__(self, stream=None):
        self.lock = threading.Lock()
        self.cells = 0
        self.stream = stream if stream is not None else sys.stderr

    def report(self, node: ExplorationNode):
        with self.lock:
            self.cells += 1
            print(f"depth={node.depth} cells={self.cells} "
                  f"feasible={100 * node.feasible_rate:.1f} "
                  f"entropy={node.entropy:.4f}", file=self.stream)


def _update_stats(node: ExplorationNode):
    node.n_feasible = sum(1 for r in node.records if r.verdict.status == "Feasible")
    node.n_infeasible = sum(1 for r in node.records if r.verdict.status == "Infeasible")
    node.n_discarded = sum(1 for r in node.records if r.verdict.status == "Discarded")
    node.entropy = entropy([int(r.stability.stable) for r in node.records
                            if r.verdict.status == "Feasible" and r.stability])


def explore(space: OperatingSpaceSpec, grid: GridModel, config: ExplorationConfig,
            progress_stream=None) -> tuple[ExplorationNode, list[LabeledRecord]]:
    """Run the full exploration; returns the node tree and every record.

    Every assessed sample appears exactly once in the output (keyed by its
    origin cell path and sample/case indices); inherited samples are reused,
    never re-assessed.
    """
    root = ExplorationNode(cell=space.root_cell())
    all_records: list[LabeledRecord] = []
    records_lock = threading.Lock()
    progress = _Progress(progress_stream)
    pool = ThreadPoolExecutor(max_workers=max(1, config.workers))

    def run_node(node: ExplorationNode, inherited: list[LabeledRecord],
                 parent_entropy: float | None):
        points = hierarchical_sample(
            node.cell, config.n_samples, config.n_cases, grid, space,
            config.seed, config.loss_factor, config.dev_bound,
            config.randomize_loads)
        futures = [pool.submit(assess, grid, op, node.cell, config, node.depth)
                   for op in points]
        new_records = [f.result() for f in futures]
        with records_lock:
            all_records.extend(new_records)
        node.records = inherited + new_records
        _update_stats(node)
        progress.report(node)
        node.stop_reason = should_stop(node, parent_entropy, config, space)
        if node.stop_reason is not None:
            return
        dims = choose_split_dims(node, config, space)
        if not dims:
            node.stop_reason = STOP_TOLERANCE_FLOOR
            return
        cells = [node.cell]
        for d in dims:
            nxt = []
            for c in cells:
                try:
                    nxt.extend(split(c, d, config.min_tolerance_frac))
                except ToleranceFloorError:
                    nxt.append(c)
            cells = nxt
        if len(cells) == 1:
            node.stop_reason = STOP_TOLERANCE_FLOOR
            return
        threads = []
        for c in cells:
            child = ExplorationNode(cell=c)
            node.children.append(child)
            handed = [r for r in node.records if contains(c, r.op)]
            t = threading.Thread(target=run_node,
                                 args=(child, handed, node.entropy))
            t.start()
            threads.append(t)
        for t in threads:
            t.join()

    try:
        run_node(root, [], None)
    finally:
        pool.shutdown(wait=True)
    all_records.sort(key=lambda r: (r.cell_path, r.op.sample_index, r.op.case_index))
    return root, all_records
