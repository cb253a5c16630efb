"""Search-space definition, genome encoding, validation and sampling.

A spatial genome fixes one value per elastic dimension (depth, width, kernel,
group, attention) for every backbone stage, plus the stem width and the three
deconv head layers. A temporal genome adds a fusion choice (operation x stage).
A video genome is one key-frame genome plus T per-frame temporal genomes.

All types here are immutable values; every function is pure.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, replace

FUSION_OPS = ("add", "mul", "cat")

STAGE_KERNELS = (3, 5, 7)
DECONV_KERNELS = (2, 4)


def grid_values(lo: int, hi: int, step: int) -> tuple[int, ...]:
    """Integer grid anchored at `lo`; `hi` is always included so range endpoints
    stay reachable even when the span is not a multiple of the step."""
    if lo > hi:
        raise ValueError(f"empty range [{lo}, {hi}]")
    vals = list(range(lo, hi + 1, step))
    if vals[-1] != hi:
        vals.append(hi)
    return tuple(vals)


@dataclass(frozen=True)
class StageRange:
    """Per-stage elastic ranges and their search-step grid."""

    depth_range: tuple[int, int]
    width_range: tuple[int, int]
    kernel_choices: tuple[int, ...]
    group_range: tuple[int, int]
    attention_allowed: bool = True
    depth_step: int = 1
    width_step: int = 16
    group_step: int = 16

    def __post_init__(self):
        if self.depth_range[0] < 1:
            raise ValueError("minimum stage depth must be at least 1")
        bad = [k for k in self.kernel_choices if k not in STAGE_KERNELS]
        if bad:
            raise ValueError(f"stage kernels must be within {STAGE_KERNELS}, got {bad}")

    def depth_values(self):
        return grid_values(*self.depth_range, self.depth_step)

    def width_values(self):
        return grid_values(*self.width_range, self.width_step)

    def group_values(self):
        return grid_values(*self.group_range, self.group_step)


@dataclass(frozen=True)
class HeadRange:
    """Elastic ranges for one deconv layer of the upsampling head."""

    width_range: tuple[int, int]
    kernel_choices: tuple[int, ...]
    group_range: tuple[int, int]
    width_step: int = 16
    group_step: int = 16

    def __post_init__(self):
        bad = [k for k in self.kernel_choices if k not in DECONV_KERNELS]
        if bad:
            raise ValueError(f"deconv kernels must be within {DECONV_KERNELS}, got {bad}")

    def width_values(self):
        return grid_values(*self.width_range, self.width_step)

    def group_values(self):
        return grid_values(*self.group_range, self.group_step)


@dataclass(frozen=True)
class SearchSpace:
    """Whole-network search space plus the fixed structural template.

    `stage_strides` and `expansion` are template structure (not searched): each
    stage's first block applies its stride, and every bottleneck's output width
    is `expansion * width`.
    """

    stem_width_range: tuple[int, int]
    stages: tuple[StageRange, ...]
    head: tuple[HeadRange, ...]
    stage_strides: tuple[int, ...] = (2, 1, 2, 2)
    expansion: int = 1
    attention_kind: str = "gc"
    stem_width_step: int = 16
    fusion_ops: tuple[str, ...] = FUSION_OPS
    fusion_stages: tuple[int, ...] = (1, 2, 3, 4)

    def __post_init__(self):
        if len(self.stage_strides) != len(self.stages):
            raise ValueError("one stride per stage required")
        for s in self.fusion_stages:
            if not 1 <= s <= len(self.stages):
                raise ValueError(f"fusion stage {s} out of range")

    def stem_width_values(self):
        return grid_values(*self.stem_width_range, self.stem_width_step)

    @property
    def num_stages(self) -> int:
        return len(self.stages)


@dataclass(frozen=True)
class StageChoice:
    depth: int
    width: int
    kernel: int
    group: int
    attention: bool


@dataclass(frozen=True)
class HeadChoice:
    width: int
    kernel: int
    group: int


@dataclass(frozen=True)
class SpatialGenome:
    stem_width: int
    stages: tuple[StageChoice, ...]
    head: tuple[HeadChoice, ...]

    def to_dict(self) -> dict:
        return {
            "stem": self.stem_width,
            "stages": [
                {
                    "depth": s.depth,
                    "width": s.width,
                    "kernel": s.kernel,
                    "group": s.group,
                    "attention": s.attention,
                }
                for s in self.stages
            ],
            "head": [
                {"width": h.width, "kernel": h.kernel, "group": h.group} for h in self.head
            ],
            "fusion": None,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(frozen=True)
class TemporalGenome:
    spatial: SpatialGenome
    fusion_op: str
    fusion_stage: int

    def to_dict(self) -> dict:
        d = self.spatial.to_dict()
        d["fusion"] = {"op": self.fusion_op, "stage": self.fusion_stage}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(frozen=True)
class VideoGenome:
    """Key-frame genome plus one temporal genome per propagated frame."""

    key: SpatialGenome
    frames: tuple[TemporalGenome, ...]

    @property
    def t_frames(self) -> int:
        return len(self.frames)

    def to_dict(self) -> dict:
        return {"key": self.key.to_dict(), "frames": [f.to_dict() for f in self.frames]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _parse_spatial(d: dict) -> SpatialGenome:
    stages = tuple(
        StageChoice(s["depth"], s["width"], s["kernel"], s["group"], bool(s["attention"]))
        for s in d["stages"]
    )
    head = tuple(HeadChoice(h["width"], h["kernel"], h["group"]) for h in d["head"])
    return SpatialGenome(stem_width=d["stem"], stages=stages, head=head)


def parse_genome(data: str | dict) -> SpatialGenome | TemporalGenome:
    """Inverse of `to_json`/`to_dict` for spatial and temporal genomes."""
    d = json.loads(data) if isinstance(data, str) else data
    spatial = _parse_spatial(d)
    fusion = d.get("fusion")
    if fusion is None:
        return spatial
    return TemporalGenome(spatial=spatial, fusion_op=fusion["op"], fusion_stage=fusion["stage"])


def parse_video_genome(data: str | dict) -> VideoGenome:
    d = json.loads(data) if isinstance(data, str) else data
    frames = []
    for f in d["frames"]:
        g = parse_genome(f)
        if not isinstance(g, TemporalGenome):
            raise ValueError("video genome frames must carry a fusion choice")
        frames.append(g)
    return VideoGenome(key=_parse_spatial(d["key"]), frames=tuple(frames))


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    field: str
    stage: int | None
    value: object
    allowed: str

    def __str__(self):
        where = f" (stage {self.stage})" if self.stage is not None else ""
        return f"{self.field}{where}: got {self.value!r}, allowed {self.allowed}"


def _check_grid(field_name, stage, value, values, out: list):
    if value not in values:
        out.append(Violation(field_name, stage, value, f"{{{', '.join(map(str, values))}}}"))


def validate(genome, space: SearchSpace) -> list[Violation]:
    """Return all invariant violations of `genome` against `space` (empty = ok).

    Violations are data, not exceptions: each names the field, stage, offending
    value and the allowed set.
    """
    if isinstance(genome, VideoGenome):
        out = validate(genome.key, space)
        if genome.t_frames < 1:
            out.append(Violation("frames", None, genome.t_frames, ">= 1 temporal genome"))
        for t, fg in enumerate(genome.frames, start=1):
            for v in validate(fg, space):
                out.append(replace(v, field=f"frame[{t}].{v.field}"))
        return out
    if isinstance(genome, TemporalGenome):
        out = validate(genome.spatial, space)
        if genome.fusion_op not in space.fusion_ops:
            out.append(Violation("fusion_op", None, genome.fusion_op, str(space.fusion_ops)))
        if genome.fusion_stage not in space.fusion_stages:
            out.append(
                Violation("fusion_stage", None, genome.fusion_stage, str(space.fusion_stages))
            )
        return out

    out: list[Violation] = []
    if len(genome.stages) != space.num_stages:
        out.append(Violation("stages", None, len(genome.stages), f"{space.num_stages} stages"))
        return out
    if len(genome.head) != len(space.head):
        out.append(Violation("head", None, len(genome.head), f"{len(space.head)} deconv layers"))
        return out

    _check_grid("stem_width", None, genome.stem_width, space.stem_width_values(), out)
    for i, (choice, rng) in enumerate(zip(genome.stages, space.stages), start=1):
        _check_grid("depth", i, choice.depth, rng.depth_values(), out)
        _check_grid("width", i, choice.width, rng.width_values(), out)
        _check_grid("kernel", i, choice.kernel, rng.kernel_choices, out)
        _check_grid("group", i, choice.group, rng.group_values(), out)
        if choice.group in rng.group_values() and choice.width % choice.group != 0:
            out.append(
                Violation("group", i, choice.group, f"divisors of stage width {choice.width}")
            )
        if choice.attention and not rng.attention_allowed:
            out.append(Violation("attention", i, True, "{False}"))

    prev_w = genome.stages[-1].width * space.expansion if not out else None
    for i, (choice, rng) in enumerate(zip(genome.head, space.head), start=1):
        _check_grid("head.width", i, choice.width, rng.width_values(), out)
        _check_grid("head.kernel", i, choice.kernel, rng.kernel_choices, out)
        _check_grid("head.group", i, choice.group, rng.group_values(), out)
        if prev_w is not None and choice.group in rng.group_values():
            if choice.width % choice.group != 0 or prev_w % choice.group != 0:
                out.append(
                    Violation(
                        "head.group",
                        i,
                        choice.group,
                        f"common divisors of ({prev_w}, {choice.width})",
                    )
                )
            prev_w = choice.width
    return out


# ---------------------------------------------------------------------------
# sampling and corners


def _largest_divisor_on_grid(values, *channels) -> int:
    """Largest grid value dividing every channel count (1 as a safe fallback)."""
    for g in sorted(values, reverse=True):
        if all(c % g == 0 for c in channels):
            return g
    return 1


def _smallest_divisor_on_grid(values, *channels) -> int:
    for g in sorted(values):
        if all(c % g == 0 for c in channels):
            return g
    return 1


def _round_group(sampled: int, values, *channels) -> int:
    """Round a sampled group down to the largest grid value <= sampled that
    divides every channel count; falls back to the largest feasible divisor."""
    for g in sorted(values, reverse=True):
        if g <= sampled and all(c % g == 0 for c in channels):
            return g
    return _largest_divisor_on_grid(values, *channels)


def sample_random(space: SearchSpace, rng_seed: int | random.Random) -> SpatialGenome:
    """Uniform independent draw per dimension per stage on the step grid.

    Group values are rounded down to the nearest feasible divisor so sampled
    genomes always validate. Deterministic for a fixed seed.
    """
    rng = rng_seed if isinstance(rng_seed, random.Random) else random.Random(rng_seed)
    stem = rng.choice(space.stem_width_values())
    stages = []
    for srange in space.stages:
        depth = rng.choice(srange.depth_values())
        width = rng.choice(srange.width_values())
        kernel = rng.choice(srange.kernel_choices)
        group = _round_group(rng.choice(srange.group_values()), srange.group_values(), width)
        attn = rng.random() < 0.5 if srange.attention_allowed else False
        stages.append(StageChoice(depth, width, kernel, group, attn))
    head = []
    prev = stages[-1].width * space.expansion
    for hrange in space.head:
        width = rng.choice(hrange.width_values())
        kernel = rng.choice(hrange.kernel_choices)
        group = _round_group(
            rng.choice(hrange.group_values()), hrange.group_values(), width, prev
        )
        head.append(HeadChoice(width, kernel, group))
        prev = width
    return SpatialGenome(stem_width=stem, stages=tuple(stages), head=tuple(head))


def sample_temporal(space: SearchSpace, rng_seed: int | random.Random) -> TemporalGenome:
    """`sample_random` plus a uniform fusion (operation, stage) draw."""
    rng = rng_seed if isinstance(rng_seed, random.Random) else random.Random(rng_seed)
    spatial = sample_random(space, rng)
    return TemporalGenome(
        spatial=spatial,
        fusion_op=rng.choice(list(space.fusion_ops)),
        fusion_stage=rng.choice(list(space.fusion_stages)),
    )


def sample_video(
    space: SearchSpace, t_frames: int, rng_seed: int | random.Random, key: SpatialGenome
) -> VideoGenome:
    """Independent temporal genome per frame; frames need not share budgets."""
    rng = rng_seed if isinstance(rng_seed, random.Random) else random.Random(rng_seed)
    frames = tuple(sample_temporal(space, rng) for _ in range(t_frames))
    return VideoGenome(key=key, frames=frames)


def corner(space: SearchSpace, which: str) -> SpatialGenome:
    """FLOPs-extreme genome: 'smallest' minimizes cost (min depth/width/kernel,
    most groups, attention off), 'biggest' maximizes it (max depth/width/kernel,
    fewest groups, attention on). Group is inverted because more groups means
    fewer multiplies."""
    if which not in ("smallest", "biggest"):
        raise ValueError(f"corner must be 'smallest' or 'biggest', got {which!r}")
    big = which == "biggest"
    stem = max(space.stem_width_values()) if big else min(space.stem_width_values())
    stages = []
    for srange in space.stages:
        depth = max(srange.depth_values()) if big else min(srange.depth_values())
        width = max(srange.width_values()) if big else min(srange.width_values())
        kernel = max(srange.kernel_choices) if big else min(srange.kernel_choices)
        gv = srange.group_values()
        group = _smallest_divisor_on_grid(gv, width) if big else _largest_divisor_on_grid(gv, width)
        attn = srange.attention_allowed and big
        stages.append(StageChoice(depth, width, kernel, group, attn))
    head = []
    prev = stages[-1].width * space.expansion
    for hrange in space.head:
        width = max(hrange.width_values()) if big else min(hrange.width_values())
        kernel = max(hrange.kernel_choices) if big else min(hrange.kernel_choices)
        gv = hrange.group_values()
        group = (
            _smallest_divisor_on_grid(gv, width, prev)
            if big
            else _largest_divisor_on_grid(gv, width, prev)
        )
        head.append(HeadChoice(width, kernel, group))
        prev = width
    return SpatialGenome(stem_width=stem, stages=tuple(stages), head=tuple(head))


# ---------------------------------------------------------------------------
# concrete spaces


def resnet50_space() -> SearchSpace:
    """ResNet-50-style super-network template: 4 bottleneck stages between a
    7x7 stem (stride 2 + pool, 1/4 resolution) and three deconv layers back to
    1/4; stage resolutions 1/8, 1/8, 1/16, 1/32; GC attention; expansion 1."""
    stage = lambda d, w: StageRange(
        depth_range=d, width_range=w, kernel_choices=(3, 5), group_range=(16, 64)
    )
    return SearchSpace(
        stem_width_range=(32, 64),
        stages=(
            stage((3, 4), (64, 80)),
            stage((4, 6), (128, 160)),
            stage((6, 8), (256, 320)),
            stage((3, 4), (512, 640)),
        ),
        head=tuple(
            HeadRange(width_range=(64, 256), kernel_choices=(4,), group_range=(16, 64))
            for _ in range(3)
        ),
        stage_strides=(2, 1, 2, 2),
        expansion=1,
        attention_kind="gc",
    )


def sbl_resnet50_space() -> SearchSpace:
    """Singleton space whose only genome is the plain SimpleBaseline ResNet-50
    (expansion-4 bottlenecks, strides 1/2/2/2, 256ch k4 deconv head). Used as a
    cost-model reference; it is not an elastic training template."""
    stage = lambda d, w: StageRange(
        depth_range=(d, d),
        width_range=(w, w),
        kernel_choices=(3,),
        group_range=(1, 1),
        attention_allowed=False,
        group_step=1,
    )
    return SearchSpace(
        stem_width_range=(64, 64),
        stages=(stage(3, 64), stage(4, 128), stage(6, 256), stage(3, 512)),
        head=tuple(
            HeadRange(
                width_range=(256, 256), kernel_choices=(4,), group_range=(1, 1), group_step=1
            )
            for _ in range(3)
        ),
        stage_strides=(1, 2, 2, 2),
        expansion=4,
        attention_kind="gc",
    )


def sbl_resnet50_genome() -> SpatialGenome:
    return corner(sbl_resnet50_space(), "biggest")


def toy_space() -> SearchSpace:
    """Desk-scale space for synthetic-data experiments: same structure as the
    ResNet-50 template with small widths and group choices {1, 2, 4}."""
    stage = lambda d, w: StageRange(
        depth_range=d,
        width_range=w,
        kernel_choices=(3, 5),
        group_range=(1, 4),
        width_step=8,
        group_step=1,
    )
    return SearchSpace(
        stem_width_range=(8, 16),
        stages=(
            stage((1, 2), (8, 16)),
            stage((1, 2), (16, 24)),
            stage((1, 3), (24, 32)),
            stage((1, 2), (32, 48)),
        ),
        head=tuple(
            HeadRange(
                width_range=(16, 32), kernel_choices=(2, 4), group_range=(1, 4), group_step=1
            )
            for _ in range(3)
        ),
        stage_strides=(2, 1, 2, 2),
        expansion=1,
        attention_kind="gc",
        stem_width_step=8,
    )
