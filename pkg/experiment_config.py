"""
Experiment config file schema.

A config is a YAML document whose sections mirror the domain types one to
one. Unknown keys are rejected, and every validation error names the dotted
key that failed.
"""
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
import yaml

from collectives import CollectiveAlgorithm, Topology
from compression import CompressorConfig, CompressorKind
from config import Config
from errors import ConfigError, ParsimError
from simulator import CostParams
from strategies import HyperParams, Mode, StrategyConfig
from sweep import SimulationRow


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class TopologySection(Section):
    racks: int = Field(1, ge=1)
    nodes_per_rack: int = Field(1, ge=1)
    devices_per_node: int = Field(8, ge=1)
    intra_node_bw: float = Field(16e9, gt=0)
    inter_node_bw: float = Field(12.5e9, gt=0)
    inter_rack_bw: float = Field(12.5e9, gt=0)
    intra_node_lat: float = Field(1e-6, ge=0)
    inter_node_lat: float = Field(5e-6, ge=0)
    inter_rack_lat: float = Field(5e-6, ge=0)

    def to_topology(self) -> Topology:
        return Topology(**self.model_dump())


class TopologyOverride(Section):
    racks: int | None = Field(None, ge=1)
    nodes_per_rack: int | None = Field(None, ge=1)
    devices_per_node: int | None = Field(None, ge=1)
    intra_node_bw: float | None = Field(None, gt=0)
    inter_node_bw: float | None = Field(None, gt=0)
    inter_rack_bw: float | None = Field(None, gt=0)
    intra_node_lat: float | None = Field(None, ge=0)
    inter_node_lat: float | None = Field(None, ge=0)
    inter_rack_lat: float | None = Field(None, ge=0)

    def apply(self, base: TopologySection) -> TopologySection:
        changes = {k: v for k, v in self.model_dump().items() if v is not None}
        return base.model_copy(update=changes)


class CostSection(Section):
    compute_time_per_sample_per_device: float = Field(gt=0)
    activation_bytes_per_microbatch: float = Field(0.0, ge=0)
    gradient_bytes: float = Field(0.0, ge=0)
    pipeline_stage_cost_split: list[float] | None = None
    tensor_allreduces_per_microbatch: int = Field(0, ge=0)
    backward_to_forward_ratio: float = Field(2.0, gt=0)
    sync_skew: float = Field(0.0, ge=0)
    model_state_bytes: float = Field(0.0, ge=0)
    device_memory_bytes: float = Field(40e9, gt=0)

    @field_validator("pipeline_stage_cost_split")
    @classmethod
    def _fractions(cls, v):
        if v is not None and (any(not f > 0 for f in v) or abs(sum(v) - 1.0) > 1e-9):
            raise ValueError("fractions must be positive and sum to 1")
        return v

    def to_costs(self) -> CostParams:
        data = self.model_dump()
        if data["pipeline_stage_cost_split"] is not None:
            data["pipeline_stage_cost_split"] = tuple(data["pipeline_stage_cost_split"])
        return CostParams(**data)

    @classmethod
    def from_costs(cls, costs: CostParams) -> "CostSection":
        data = {k: getattr(costs, k) for k in cls.model_fields}
        if data["pipeline_stage_cost_split"] is not None:
            data["pipeline_stage_cost_split"] = list(data["pipeline_stage_cost_split"])
        return cls(**data)


class CompressorSection(Section):
    kind: CompressorKind = CompressorKind.NONE
    top_k: int | None = Field(None, ge=1)
    top_k_ratio: float | None = Field(None, gt=0, le=1)

    @model_validator(mode="after")
    def _k_given(self):
        if self.kind is CompressorKind.TOPK and (self.top_k is None) == (self.top_k_ratio is None):
            raise ValueError("topk needs exactly one of top_k or top_k_ratio")
        return self

    def to_compressor(self) -> CompressorConfig:
        return CompressorConfig(self.kind, self.top_k, self.top_k_ratio)


class StrategySection(Section):
    name: str
    scheme: str = "custom"
    nodes: int | None = Field(None, ge=1)
    global_batch: int = Field(ge=1)
    data_degree: int = Field(1, ge=1)
    tensor_degree: int = Field(1, ge=1)
    pipeline_stages: int = Field(1, ge=1)
    micro_batches: int = Field(1, ge=1)
    mode: Mode = Mode.SYNC
    collective: CollectiveAlgorithm = CollectiveAlgorithm.RING
    compressor: CompressorSection = CompressorSection()
    overlap_fraction: float = Field(0.0, ge=0, le=1)
    topology: TopologyOverride = TopologyOverride()

    def to_strategy(self) -> StrategyConfig:
        return StrategyConfig(
            data_degree=self.data_degree,
            tensor_degree=self.tensor_degree,
            pipeline_stages=self.pipeline_stages,
            micro_batches=self.micro_batches,
            mode=self.mode,
            collective=self.collective,
            compressor=self.compressor.to_compressor(),
            overlap_fraction=self.overlap_fraction,
        )


class SimulationSection(Section):
    iterations: int = Field(10, ge=1)
    trace_iterations: int = Field(1, ge=0)
    max_workers: int = Field(Config.MAX_WORKERS, ge=1)
    cache: bool = False
    micro_batch_candidates: list[int] = [1, 2, 4, 8, 16, 32]


class AnchorSection(Section):
    strategy: str
    throughput: float = Field(gt=0)


class CalibrationSection(Section):
    anchors: list[AnchorSection] = Field(min_length=1)
    free_params: list[str] = ["compute_time_per_sample_per_device"]
    tolerance: float = Field(Config.CALIBRATION_TOLERANCE, gt=0)


class SyntheticSection(Section):
    num_users: int = Field(ge=1)
    num_items: int = Field(ge=1)
    num_interactions: int = Field(ge=1)


class DatasetSection(Section):
    path: str | None = None
    synthetic: SyntheticSection | None = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.path is None) == (self.synthetic is None):
            raise ValueError("set exactly one of path or synthetic")
        return self


class ModelSection(Section):
    dim: int = Field(16, ge=1)


class HyperSection(Section):
    learning_rate: float = Field(gt=0)
    batch_size: int = Field(256, ge=1)
    steps: int = Field(1000, ge=0)
    reg: float = Field(0.0, ge=0)

    def to_hyper(self) -> HyperParams:
        return HyperParams(**self.model_dump())


class EvalSection(Section):
    k: int = Field(Config.EVAL_K, ge=1)
    negatives: int = Field(Config.EVAL_NEGATIVES, ge=1)


class VariantSection(Section):
    name: str
    data_degree: int = Field(1, ge=1)
    mode: Mode = Mode.SYNC
    collective: CollectiveAlgorithm = CollectiveAlgorithm.RING
    compressor: CompressorSection = CompressorSection()
    max_staleness: int | None = Field(None, ge=0)

    def to_strategy(self) -> StrategyConfig:
        return StrategyConfig(
            data_degree=self.data_degree,
            mode=self.mode,
            collective=self.collective,
            compressor=self.compressor.to_compressor(),
        )


class TrainerSection(Section):
    dataset: DatasetSection
    model: ModelSection = ModelSection()
    hyper: HyperSection
    eval: EvalSection = EvalSection()
    variants: list[VariantSection] = Field(min_length=1)
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    loss_every: int = Field(Config.LOSS_EVERY, ge=1)
    max_workers: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _shards_divide(self):
        for i, v in enumerate(self.variants):
            if self.hyper.batch_size % v.data_degree:
                raise ValueError(
                    f"variants.{i}: batch_size {self.hyper.batch_size} is not divisible by data_degree {v.data_degree}"
                )
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise ValueError("variant names must be unique")
        return self


class OutputSection(Section):
    directory: str = str(Config.OUTPUT_DIR)
    formats: list[Literal["csv", "md", "xlsx"]] = list(Config.DEFAULT_FORMATS)


class ExperimentConfig(Section):
    seed: int = Field(Config.DEFAULT_SEED, ge=0, lt=2**64)
    topology: TopologySection = TopologySection()
    costs: CostSection | None = None
    costs_file: str | None = None
    strategies: list[StrategySection] = []
    simulation: SimulationSection = SimulationSection()
    calibration: CalibrationSection | None = None
    trainer: TrainerSection | None = None
    output: OutputSection = OutputSection()

    @model_validator(mode="after")
    def _placement(self):
        for i, row in enumerate(self.strategies):
            topo = row.topology.apply(self.topology)
            devices = topo.racks * topo.nodes_per_rack * topo.devices_per_node
            needed = row.data_degree * row.tensor_degree * row.pipeline_stages
            if needed > devices:
                raise ValueError(
                    f"strategies.{i} ({row.name}): data_degree*tensor_degree*pipeline_stages = {needed} "
                    f"exceeds {devices} devices"
                )
        names = [row.name for row in self.strategies]
        if len(set(names)) != len(names):
            raise ValueError("strategy names must be unique")
        if self.calibration is not None:
            for i, anchor in enumerate(self.calibration.anchors):
                if anchor.strategy not in names:
                    raise ValueError(f"calibration.anchors.{i}: unknown strategy {anchor.strategy!r}")
        return self

    def simulation_rows(self) -> list[SimulationRow]:
        return [
            SimulationRow(
                name=row.name,
                scheme=row.scheme,
                global_batch=row.global_batch,
                strategy=row.to_strategy(),
                topology=row.topology.apply(self.topology).to_topology(),
                nodes=row.nodes,
            )
            for row in self.strategies
        ]

    def resolve_costs(self, base_dir: Path | None = None, override: str | Path | None = None) -> CostParams:
        """Costs from an explicit file, then costs_file, then the inline section."""
        source = override or self.costs_file
        if source is not None:
            path = Path(source)
            if not path.is_absolute() and base_dir is not None and override is None:
                path = base_dir / path
            return load_costs(path)
        if self.costs is None:
            raise ConfigError("costs: section missing and no costs_file given")
        return self.costs.to_costs()


def _format_validation(e: ValidationError) -> str:
    lines = []
    for err in e.errors():
        key = ".".join(str(part) for part in err["loc"]) or "<root>"
        lines.append(f"{key}: {err['msg']}")
    return "; ".join(lines)


def _read_yaml(path: Path) -> dict:
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML: {e}") from e
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_format_validation(e)) from e


def load_config(path: str | Path) -> ExperimentConfig:
    """
    Load and validate an experiment config

    Raises:
        ConfigError: missing file, bad YAML, unknown key or invalid value
    """
    path = Path(path)
    return parse_config(_read_yaml(path))


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)


def load_costs(path: str | Path) -> CostParams:
    """Read a fitted costs file: a mapping with a single costs section."""
    data = _read_yaml(Path(path))
    if set(data) != {"costs"}:
        raise ConfigError(f"{path}: expected a single 'costs' section, got {sorted(data)}")
    try:
        return CostSection.model_validate(data["costs"]).to_costs()
    except ValidationError as e:
        raise ConfigError(f"{path}: {_format_validation(e)}") from e
    except ParsimError as e:
        raise ConfigError(f"{path}: {e}") from e


def dump_costs(costs: CostParams) -> str:
    return yaml.safe_dump({"costs": CostSection.from_costs(costs).model_dump(mode="json")}, sort_keys=False)
