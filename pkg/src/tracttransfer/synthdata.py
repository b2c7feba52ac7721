"""Deterministic synthetic cohorts of multi-label "tract" subjects.

Each tract is a ribbon around a quadratic Bezier arc.  Arc directions are
spread over a fan so that local orientation identifies the tract, which is
what makes the voxelwise task learnable by a translation-invariant network.
A novel tract couples to a random pair of existing tracts: its mask is the
sub-level set of ``c * sd(combo) + (1 - c) * sd(own ribbon)`` where ``sd`` is
the signed distance transform, ``combo`` is the intersection or union of the
two parents and ``c`` is the co-occurrence weight.  At ``c = 1`` the mask is
exactly the parent set-combination; at ``c = 0`` it is an independent ribbon.

Input channels hold the tangent 3-vectors (zero z-component) of up to three
overlapping existing tracts per pixel, unused slots exactly zero, plus
Gaussian noise on occupied slots only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DataError, GenerationError, ParameterError
from .rng import RngState

_MAX_ATTEMPTS = 100
_EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass(frozen=True)
class CohortConfig:
    """Geometry, coupling, split sizes and seeding of one synthetic cohort."""

    h: int = 64
    w: int = 64
    m_existing: int = 12
    n_novel: int = 4
    correlation: float = 0.75
    existing_train: int = 24
    existing_val: int = 6
    fewshot_train: int = 5
    fewshot_val: int = 2
    test: int = 10
    seed: int = 20240
    noise_std: float = 0.05
    jitter: float = 1.0

    def validate(self) -> None:
        if not 0.0 <= self.correlation <= 1.0:
            raise ParameterError(f"correlation must be in [0, 1], got {self.correlation}")
        if self.h % 4 or self.w % 4 or self.h < 16 or self.w < 16:
            raise ParameterError(f"spatial size {self.h}x{self.w} must be >=16 and divisible by 4")
        if self.m_existing < 2 or self.n_novel < 1:
            raise ParameterError("need at least two existing tracts and one novel tract")
        for name in ("existing_train", "existing_val", "fewshot_train", "test"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if self.fewshot_val < 0:
            raise ParameterError("fewshot_val must be >= 0")
        if self.noise_std < 0 or self.jitter < 0:
            raise ParameterError("noise_std and jitter must be non-negative")

    def to_meta(self) -> dict:
        return {k: repr(getattr(self, k)) for k in (
            "h", "w", "m_existing", "n_novel", "correlation", "existing_train",
            "existing_val", "fewshot_train", "fewshot_val", "test", "seed",
            "noise_std", "jitter")}

    @classmethod
    def from_meta(cls, meta: dict) -> "CohortConfig":
        ints = ("h", "w", "m_existing", "n_novel", "existing_train",
                "existing_val", "fewshot_train", "fewshot_val", "test", "seed")
        kwargs = {k: int(meta[k]) for k in ints}
        kwargs.update({k: float(meta[k]) for k in ("correlation", "noise_std", "jitter")})
        return cls(**kwargs)


@dataclass
class SyntheticSubject:
    """One synthetic scan: orientation input plus both label stacks."""

    id: int
    input: np.ndarray            # [9, H, W]
    existing_labels: np.ndarray  # [M, H, W], values in {0, 1}
    novel_labels: np.ndarray     # [N, H, W], values in {0, 1}


@dataclass
class FewShotSplit:
    train: list[SyntheticSubject]
    val: list[SyntheticSubject]
    test: list[SyntheticSubject]


@dataclass
class Cohort:
    config: CohortConfig
    existing_train: list[SyntheticSubject]
    existing_val: list[SyntheticSubject]
    fewshot: FewShotSplit

    def all_subjects(self) -> list[SyntheticSubject]:
        return (self.existing_train + self.existing_val + self.fewshot.train
                + self.fewshot.val + self.fewshot.test)


@dataclass(frozen=True)
class _Arc:
    """Quadratic Bezier axis curve plus ribbon half-width, in (x, y) pixels."""

    start: np.ndarray
    control: np.ndarray
    end: np.ndarray
    width: float

    def jittered(self, rng: RngState, scale: float) -> "_Arc":
        if scale == 0.0:
            return self
        offsets = rng.generator.normal(0.0, scale, (3, 2))
        return _Arc(self.start + offsets[0], self.control + offsets[1],
                    self.end + offsets[2], self.width)

    def sample(self, n: int = 160):
        t = np.linspace(0.0, 1.0, n)[:, None]
        points = ((1 - t) ** 2 * self.start + 2 * t * (1 - t) * self.control
                  + t ** 2 * self.end)
        deriv = 2 * (1 - t) * (self.control - self.start) + 2 * t * (self.end - self.control)
        norms = np.linalg.norm(deriv, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        return points, deriv / norms


def _rasterize(arc: _Arc, h: int, w: int):
    """Boolean ribbon mask and the per-pixel tangent of the nearest axis point."""
    points, tangents = arc.sample()
    ys, xs = np.mgrid[0:h, 0:w]
    d2 = ((xs.ravel()[:, None] - points[:, 0][None]) ** 2
          + (ys.ravel()[:, None] - points[:, 1][None]) ** 2)
    nearest = d2.argmin(axis=1)
    mask = (d2[np.arange(h * w), nearest] <= arc.width ** 2).reshape(h, w)
    tangent = tangents[nearest].reshape(h, w, 2)
    return mask, tangent


def _mask_is_valid(mask: np.ndarray, min_frac: float = 0.0) -> bool:
    """Nonempty, below 40% of pixels, and a single 8-connected component.

    ``min_frac`` adds an area margin used when selecting template geometry,
    so that per-subject jitter cannot push masks below the hard invariants.
    """
    area = mask.sum()
    if area < max(min_frac * mask.size, 1) or area >= 0.4 * mask.size:
        return False
    _, count = ndimage.label(mask, structure=_EIGHT_CONNECTED)
    return count == 1


def _signed_distance(mask: np.ndarray) -> np.ndarray:
    return (ndimage.distance_transform_edt(~mask)
            - ndimage.distance_transform_edt(mask))


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels, count = ndimage.label(mask, structure=_EIGHT_CONNECTED)
    if count <= 1:
        return mask
    sizes = ndimage.sum(mask, labels, index=np.arange(1, count + 1))
    return labels == (1 + int(np.argmax(sizes)))


def _blend_masks(combo: np.ndarray, own: np.ndarray, correlation: float) -> np.ndarray:
    """Level-set blend of the two signed distances, kept single-component."""
    if correlation == 1.0:
        blended = combo.copy()
    elif correlation == 0.0:
        blended = own.copy()
    else:
        level = (correlation * _signed_distance(combo)
                 + (1 - correlation) * _signed_distance(own))
        blended = level < 0.0
    return _largest_component(blended)


def _draw_arc(rng: RngState, direction: float, h: int, w: int,
              center: np.ndarray | None = None) -> _Arc:
    gen = rng.generator
    scale = min(h, w)
    if center is None:
        center = np.array([w, h]) * gen.uniform(0.22, 0.78, 2)
    else:
        center = center + gen.normal(0.0, 0.08 * scale, 2)
    half_len = gen.uniform(0.28, 0.38) * scale
    unit = np.array([np.cos(direction), np.sin(direction)])
    normal = np.array([-unit[1], unit[0]])
    bend = gen.uniform(-0.18, 0.18) * 2 * half_len
    width = max(1.6, gen.uniform(0.05, 0.08) * scale)
    return _Arc(center - half_len * unit, center + bend * normal,
                center + half_len * unit, width)


@dataclass(frozen=True)
class _NovelTemplate:
    parent_a: int
    parent_b: int
    use_intersection: bool
    arc: _Arc


class _CohortTemplates:
    """Per-tract base geometry shared by every subject of a cohort."""

    def __init__(self, config: CohortConfig, rng: RngState):
        h, w = config.h, config.w
        n_directions = config.m_existing + config.n_novel
        directions = np.pi * (np.arange(n_directions) + 0.5) / n_directions
        order = rng.child("direction-order").generator.permutation(n_directions)

        self.existing: list[_Arc] = []
        for i in range(config.m_existing):
            arc = self._valid_arc(rng.child("existing", i), directions[order[i]], h, w,
                                  f"existing tract {i}")
            self.existing.append(arc)

        existing_masks = [_rasterize(arc, h, w)[0] for arc in self.existing]
        self.novel: list[_NovelTemplate] = []
        for j in range(config.n_novel):
            direction = directions[order[config.m_existing + j]]
            self.novel.append(self._valid_novel(
                rng.child("novel", j), direction, existing_masks, config, f"novel tract {j}"))

    @staticmethod
    def _valid_arc(rng: RngState, direction: float, h: int, w: int, label: str) -> _Arc:
        for attempt in range(_MAX_ATTEMPTS):
            arc = _draw_arc(rng.child(attempt), direction, h, w)
            if _mask_is_valid(_rasterize(arc, h, w)[0], min_frac=0.008):
                return arc
        raise GenerationError(f"could not realize geometry for {label}")

    @staticmethod
    def _valid_novel(rng: RngState, direction: float, existing_masks: list[np.ndarray],
                     config: CohortConfig, label: str) -> _NovelTemplate:
        h, w = config.h, config.w
        m = len(existing_masks)
        for attempt in range(_MAX_ATTEMPTS):
            attempt_rng = rng.child(attempt)
            gen = attempt_rng.generator
            a, b = gen.choice(m, size=2, replace=False)
            use_intersection = bool(gen.random() < 0.5)
            combo = (existing_masks[a] & existing_masks[b] if use_intersection
                     else existing_masks[a] | existing_masks[b])
            if not _mask_is_valid(combo, min_frac=0.012):
                continue
            # anchor the independent ribbon near the parent combination so
            # intermediate blends stay connected under per-subject jitter;
            # at zero coupling the ribbon must stay genuinely independent
            if config.correlation > 0.0:
                ys, xs = np.nonzero(combo)
                centroid = np.array([xs.mean(), ys.mean()])
            else:
                centroid = None
            arc = _draw_arc(attempt_rng.child("arc"), direction, h, w, center=centroid)
            own = _rasterize(arc, h, w)[0]
            if not _mask_is_valid(own, min_frac=0.008):
                continue
            if not _mask_is_valid(_blend_masks(combo, own, config.correlation),
                                  min_frac=0.012):
                continue
            return _NovelTemplate(int(a), int(b), use_intersection, arc)
        raise GenerationError(f"could not realize geometry for {label}")


def _subject_tract_masks(config: CohortConfig, templates: _CohortTemplates,
                         rng: RngState):
    """Jittered per-subject masks and tangents for every tract."""
    h, w = config.h, config.w
    existing_masks, existing_tangents = [], []
    for i, arc in enumerate(templates.existing):
        for attempt in range(_MAX_ATTEMPTS):
            jittered = arc.jittered(rng.child("existing", i, attempt), config.jitter)
            mask, tangent = _rasterize(jittered, h, w)
            if _mask_is_valid(mask):
                break
        else:
            raise GenerationError(f"could not realize geometry for existing tract {i}")
        existing_masks.append(mask)
        existing_tangents.append(tangent)

    novel_masks = []
    for j, template in enumerate(templates.novel):
        combo = (existing_masks[template.parent_a] & existing_masks[template.parent_b]
                 if template.use_intersection
                 else existing_masks[template.parent_a] | existing_masks[template.parent_b])
        # jitter can pull thin parents apart or slide a crossing away from the
        # ribbon; when the coupled construction is infeasible the mask falls
        # back to the independent component (no co-occurrence this subject)
        correlation = config.correlation if combo.any() else 0.0
        for attempt in range(_MAX_ATTEMPTS):
            jittered = template.arc.jittered(rng.child("novel", j, attempt), config.jitter)
            own = _rasterize(jittered, h, w)[0]
            if not _mask_is_valid(own):
                continue
            effective = correlation if attempt < _MAX_ATTEMPTS // 2 else 0.0
            blended = _blend_masks(combo, own, effective)
            if _mask_is_valid(blended):
                novel_masks.append(blended)
                break
        else:
            raise GenerationError(f"could not realize geometry for novel tract {j}")
    return existing_masks, existing_tangents, novel_masks


def _orientation_input(config: CohortConfig, existing_masks, existing_tangents,
                       rng: RngState) -> np.ndarray:
    """Fill up to three tangent slots per pixel, then add noise to occupied slots."""
    h, w = config.h, config.w
    channels = np.zeros((9, h, w))
    occupancy = np.zeros((h, w), dtype=int)
    for mask, tangent in zip(existing_masks, existing_tangents):
        for slot in range(3):
            sel = mask & (occupancy == slot)
            if not sel.any():
                continue
            channels[3 * slot + 0][sel] = tangent[:, :, 0][sel]
            channels[3 * slot + 1][sel] = tangent[:, :, 1][sel]
            # z-component of the embedded 3-vector stays zero
        occupancy[mask & (occupancy < 3)] += 1
    if config.noise_std > 0:
        noise = rng.generator.normal(0.0, config.noise_std, (9, h, w))
        for slot in range(3):
            occupied = occupancy > slot
            for c in range(3):
                channels[3 * slot + c][occupied] += noise[3 * slot + c][occupied]
    return channels


def _make_subject(config: CohortConfig, templates: _CohortTemplates,
                  subject_id: int, rng: RngState) -> SyntheticSubject:
    existing_masks, existing_tangents, novel_masks = _subject_tract_masks(
        config, templates, rng.child("masks"))
    channels = _orientation_input(config, existing_masks, existing_tangents,
                                  rng.child("noise"))
    return SyntheticSubject(
        id=subject_id,
        input=channels,
        existing_labels=np.stack(existing_masks).astype(np.float64),
        novel_labels=np.stack(novel_masks).astype(np.float64),
    )


def generate_cohort(config: CohortConfig) -> Cohort:
    """Generate every split of a cohort, fully determined by the config."""
    config.validate()
    root = RngState(config.seed)
    templates = _CohortTemplates(config, root.child("templates"))

    counts = [("existing_train", config.existing_train),
              ("existing_val", config.existing_val),
              ("fewshot_train", config.fewshot_train),
              ("fewshot_val", config.fewshot_val),
              ("test", config.test)]
    groups: dict[str, list[SyntheticSubject]] = {}
    next_id = 0
    for name, count in counts:
        subjects = []
        for _ in range(count):
            subjects.append(_make_subject(config, templates, next_id,
                                          root.child("subject", next_id)))
            next_id += 1
        groups[name] = subjects

    fewshot = FewShotSplit(train=groups["fewshot_train"], val=groups["fewshot_val"],
                           test=groups["test"])
    return Cohort(config=config, existing_train=groups["existing_train"],
                  existing_val=groups["existing_val"], fewshot=fewshot)


def subsample_fewshot(split: FewShotSplit, k_train: int, k_val: int,
                      seed: int) -> FewShotSplit:
    """Seeded subset of the few-shot pool; the test split is never touched.

    Selected indices are re-sorted so that requesting the full pool returns
    it unchanged.
    """
    if k_train < 1:
        raise DataError(f"k_train must be >= 1, got {k_train}")
    if k_train > len(split.train) or k_val > len(split.val):
        raise DataError(
            f"requested {k_train}/{k_val} subjects but pool has "
            f"{len(split.train)}/{len(split.val)}")
    gen = RngState(seed).child("fewshot-subsample").generator
    train_idx = sorted(gen.permutation(len(split.train))[:k_train])
    val_idx = sorted(gen.permutation(len(split.val))[:k_val])
    return FewShotSplit(train=[split.train[i] for i in train_idx],
                        val=[split.val[i] for i in val_idx],
                        test=split.test)
