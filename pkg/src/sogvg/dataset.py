"""Synthetic referring-expression corpus.

Scenes are flat-shaded shapes on a gray background.  Each sample pairs an
image with a templated expression that uniquely identifies one object, which
is verified by exhaustively evaluating the expression against every object in
the scene.  "Hard" samples plant at least one distractor sharing the target's
shape and color, so attribute templates fail and the expression must use size
or a spatial relation; those are the samples where confusable objects exist.

Generation is reproducible: sample i of a corpus draws from
default_rng([corpus_seed, i]) with i unique across splits.
"""

import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

from .errors import GenerationError, InvalidInputError, ManifestError
from .head import AnchorSet, Box, iou

MANIFEST_VERSION = 1

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (200, 40, 40),
    "green": (40, 160, 60),
    "blue": (40, 80, 200),
    "yellow": (220, 200, 40),
    "purple": (150, 60, 180),
}
SIZES = ("small", "large")
# Box side as a fraction of the image side.
SIZE_RANGES = {"small": (0.08, 0.14), "large": (0.18, 0.28)}
RELATIONS = ("left_of", "right_of", "above", "below", "touching")
RELATION_TOKENS = {
    "left_of": ("left", "of"),
    "right_of": ("right", "of"),
    "above": ("above",),
    "below": ("below",),
    "touching": ("touching",),
}
BACKGROUND = (128, 128, 128)

# Spatial predicates need a visible margin to be decidable from pixels alone.
RELATION_MARGIN = 0.05   # of image side, for left/right/above/below
TOUCH_DISTANCE = 0.025   # of image side, for touching
PLACEMENT_MARGIN = 4.0   # px from the image border
MIN_SEPARATION = 2.0     # px between boxes along the separating axis

PAD_TOKEN = "<pad>"


def build_vocabulary() -> List[str]:
    """Closed vocabulary of every token a template can emit, padding first."""
    tokens = set(SHAPES) | set(COLORS) | set(SIZES) | {"the"}
    for rel_tokens in RELATION_TOKENS.values():
        tokens.update(rel_tokens)
    return [PAD_TOKEN] + sorted(tokens)


def tokenize(expression: str, vocabulary: Sequence[str]) -> List[int]:
    index = {token: i for i, token in enumerate(vocabulary)}
    ids = []
    for token in expression.split():
        if token not in index:
            raise InvalidInputError(f"token {token!r} not in vocabulary")
        ids.append(index[token])
    if not ids:
        raise InvalidInputError("empty expression")
    return ids


@dataclass
class ObjectSpec:
    """One scene object: categorical attributes, box, and its relations to
    other objects as (predicate, other id) pairs."""

    shape: str
    color: str
    size: str
    box: Box
    relations: List[Tuple[str, int]] = field(default_factory=list)


@dataclass
class Scene:
    objects: List[ObjectSpec]
    target_id: int
    hard: bool
    image_size: int


def _axis_gaps(a: Box, b: Box) -> Tuple[float, float]:
    dx = max(b.x_min - a.x_max, a.x_min - b.x_max)
    dy = max(b.y_min - a.y_max, a.y_min - b.y_max)
    return dx, dy


def relation_holds(predicate: str, a: Box, b: Box, image_size: int) -> bool:
    """Whether `a <predicate> b` holds geometrically."""
    margin = RELATION_MARGIN * image_size
    ax, ay = a.center
    bx, by = b.center
    if predicate == "left_of":
        return bx - ax >= margin
    if predicate == "right_of":
        return ax - bx >= margin
    if predicate == "above":
        return by - ay >= margin
    if predicate == "below":
        return ay - by >= margin
    if predicate == "touching":
        dx, dy = _axis_gaps(a, b)
        return max(dx, dy) <= TOUCH_DISTANCE * image_size
    raise InvalidInputError(f"unknown relation {predicate!r}")


def compute_relations(objects: Sequence[ObjectSpec], image_size: int) -> None:
    """Fill every object's relations list from the box geometry."""
    for i, a in enumerate(objects):
        a.relations = [
            (predicate, j)
            for predicate in RELATIONS
            for j, b in enumerate(objects)
            if j != i and relation_holds(predicate, a.box, b.box, image_size)
        ]


def expression_matches(expression: str, scene: Scene) -> List[int]:
    """Ids of every object satisfying the expression; the uniqueness checker.

    Evaluates geometry directly through relation_holds, independent of the
    relations cached on the objects.
    """
    tokens = expression.split()
    objs = scene.objects

    if len(tokens) == 2 and tokens[0] in COLORS and tokens[1] in SHAPES:
        color, shape = tokens
        return [i for i, o in enumerate(objs) if o.color == color and o.shape == shape]

    if len(tokens) == 3 and tokens[0] in SIZES and tokens[1] in COLORS and tokens[2] in SHAPES:
        size, color, shape = tokens
        return [
            i
            for i, o in enumerate(objs)
            if o.size == size and o.color == color and o.shape == shape
        ]

    if len(tokens) >= 5 and tokens[0] in SHAPES and tokens[-3] == "the":
        shape, rel_tokens = tokens[0], tuple(tokens[1:-3])
        ref_color, ref_shape = tokens[-2], tokens[-1]
        predicate = next(
            (p for p, toks in RELATION_TOKENS.items() if toks == rel_tokens), None
        )
        if predicate is None or ref_color not in COLORS or ref_shape not in SHAPES:
            raise InvalidInputError(f"cannot parse expression {expression!r}")
        return [
            i
            for i, o in enumerate(objs)
            if o.shape == shape
            and any(
                j != i
                and r.color == ref_color
                and r.shape == ref_shape
                and relation_holds(predicate, o.box, r.box, scene.image_size)
                for j, r in enumerate(objs)
            )
        ]

    raise InvalidInputError(f"cannot parse expression {expression!r}")


def generate_expression(
    scene: Scene, target_id: int, rng: Optional[np.random.Generator] = None
) -> str:
    """Shortest template that uniquely picks out the target.

    Candidate order: "<color> <shape>", then "<size> <color> <shape>", then
    "<shape> <relation> the <color> <shape>" where the referenced object has a
    scene-unique (color, shape).  Among equally short unique candidates one is
    drawn with rng (first one if rng is None).
    """
    if not 0 <= target_id < len(scene.objects):
        raise InvalidInputError(f"no object {target_id} in a {len(scene.objects)}-object scene")
    target = scene.objects[target_id]
    candidates: List[List[str]] = []

    attribute_forms = [
        [target.color, target.shape],
        [target.size, target.color, target.shape],
    ]
    for tokens in attribute_forms:
        if expression_matches(" ".join(tokens), scene) == [target_id]:
            candidates.append(tokens)

    pair_counts: Dict[Tuple[str, str], int] = {}
    for obj in scene.objects:
        key = (obj.color, obj.shape)
        pair_counts[key] = pair_counts.get(key, 0) + 1
    for predicate in RELATIONS:
        for ref_id, ref in enumerate(scene.objects):
            if ref_id == target_id or pair_counts[(ref.color, ref.shape)] != 1:
                continue
            if not relation_holds(predicate, target.box, ref.box, scene.image_size):
                continue
            tokens = (
                [target.shape]
                + list(RELATION_TOKENS[predicate])
                + ["the", ref.color, ref.shape]
            )
            if expression_matches(" ".join(tokens), scene) == [target_id]:
                candidates.append(tokens)

    if not candidates:
        raise GenerationError("no unique expression for this scene")
    shortest = min(len(c) for c in candidates)
    pool = [c for c in candidates if len(c) == shortest]
    chosen = pool[0] if rng is None or len(pool) == 1 else pool[int(rng.integers(len(pool)))]
    return " ".join(chosen)


def _place_boxes(
    rng: np.random.Generator, sizes: Sequence[str], image_size: int
) -> Optional[List[Box]]:
    boxes: List[Box] = []
    for size in sizes:
        lo, hi = SIZE_RANGES[size]
        placed = False
        for _ in range(60):
            side = rng.uniform(lo, hi) * image_size
            x = rng.uniform(PLACEMENT_MARGIN, image_size - side - PLACEMENT_MARGIN)
            y = rng.uniform(PLACEMENT_MARGIN, image_size - side - PLACEMENT_MARGIN)
            box = Box(x, y, x + side, y + side)
            if all(max(_axis_gaps(box, other)) >= MIN_SEPARATION for other in boxes):
                boxes.append(box)
                placed = True
                break
        if not placed:
            return None
    return boxes


def generate_scene(rng: np.random.Generator, config, hard: Optional[bool] = None) -> Scene:
    """Sample object count, attributes, and non-overlapping boxes.

    In hard mode one distractor copies the target's shape and color.  Raises
    GenerationError when placement keeps failing.
    """
    shapes, colors = list(SHAPES), list(COLORS)
    if hard is None:
        hard = bool(rng.random() < config.hard_fraction)
    for _ in range(40):
        n = int(rng.integers(config.min_objects, config.max_objects + 1))
        target_id = int(rng.integers(n))
        obj_shapes = [shapes[int(rng.integers(len(shapes)))] for _ in range(n)]
        obj_colors = [colors[int(rng.integers(len(colors)))] for _ in range(n)]
        obj_sizes = [SIZES[int(rng.integers(len(SIZES)))] for _ in range(n)]
        if hard:
            distractor = int(rng.integers(n - 1))
            if distractor >= target_id:
                distractor += 1
            obj_shapes[distractor] = obj_shapes[target_id]
            obj_colors[distractor] = obj_colors[target_id]
        boxes = _place_boxes(rng, obj_sizes, config.image_size)
        if boxes is None:
            continue
        objects = [
            ObjectSpec(shape=s, color=c, size=z, box=b)
            for s, c, z, b in zip(obj_shapes, obj_colors, obj_sizes, boxes)
        ]
        compute_relations(objects, config.image_size)
        return Scene(objects=objects, target_id=target_id, hard=hard, image_size=config.image_size)
    raise GenerationError("could not place a scene after 40 attempts")


def make_sample(rng: np.random.Generator, config) -> Tuple[Scene, str]:
    """Scene plus unique expression, resampling the scene when no template works.

    The hard flag is drawn once up front so that resampling cannot bias the
    realized hard fraction (hard scenes fail expression generation more often).
    """
    hard = bool(rng.random() < config.hard_fraction)
    for _ in range(25):
        scene = generate_scene(rng, config, hard=hard)
        try:
            return scene, generate_expression(scene, scene.target_id, rng)
        except GenerationError:
            continue
    raise GenerationError("could not build an unambiguous sample after 25 attempts")


def render(objects: Sequence[ObjectSpec], image_size: int) -> np.ndarray:
    """Rasterize a scene, returning float32 (H, W, 3) in [0, 1].

    Flat shading, no anti-aliasing, integer coordinates: bitwise deterministic.
    """
    image = Image.new("RGB", (image_size, image_size), BACKGROUND)
    draw = ImageDraw.Draw(image)
    for obj in objects:
        x0, y0 = int(round(obj.box.x_min)), int(round(obj.box.y_min))
        x1, y1 = int(round(obj.box.x_max)), int(round(obj.box.y_max))
        color = COLORS[obj.color]
        if obj.shape == "circle":
            draw.ellipse([x0, y0, x1, y1], fill=color)
        elif obj.shape == "square":
            draw.rectangle([x0, y0, x1, y1], fill=color)
        else:  # triangle: apex top center, base along the bottom edge
            draw.polygon([((x0 + x1) // 2, y0), (x0, y1), (x1, y1)], fill=color)
    return np.asarray(image, dtype=np.float32) / 255.0


@dataclass
class SampleRecord:
    """One manifest entry; objects are kept so expressions can be re-verified."""

    index: int
    split: str
    image_path: str
    expression: str
    target_id: int
    gt_box: Box
    hard: bool
    objects: List[ObjectSpec]


@dataclass
class DatasetManifest:
    version: int
    image_size: int
    vocabulary: List[str]
    anchors: AnchorSet
    samples: List[SampleRecord]

    def split_samples(self, split: str) -> List[SampleRecord]:
        return [s for s in self.samples if s.split == split]

    def scene_for(self, record: SampleRecord) -> Scene:
        return Scene(
            objects=record.objects,
            target_id=record.target_id,
            hard=record.hard,
            image_size=self.image_size,
        )


def kmeans_anchors(widths_heights: np.ndarray, n_iter: int = 100) -> AnchorSet:
    """Nine (w, h) centroids from the training boxes, three per level.

    Initialization takes the boxes at evenly spaced ranks of the area ordering,
    so the result is deterministic in the data alone.  After convergence the
    centroids are sorted by area: the smallest three go to the stride-8 level.
    """
    data = np.asarray(widths_heights, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != 2 or data.shape[0] < 1:
        raise InvalidInputError(f"need (n, 2) width-height rows, got {data.shape}")
    if data.shape[0] < 9:
        data = np.tile(data, (-(-9 // data.shape[0]), 1))
    order = np.argsort(data[:, 0] * data[:, 1], kind="stable")
    centroids = data[order[np.linspace(0, len(order) - 1, 9).round().astype(int)]].copy()
    for _ in range(n_iter):
        distances = ((data[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        nearest = distances.argmin(axis=1)
        for c in range(9):
            members = data[nearest == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
    centroids = centroids[np.argsort(centroids[:, 0] * centroids[:, 1], kind="stable")]
    per_level = {
        level: tuple((float(w), float(h)) for w, h in centroids[i * 3 : (i + 1) * 3])
        for i, level in enumerate((3, 4, 5))
    }
    return AnchorSet(per_level=per_level)


def generate_corpus(config, out_dir: str) -> DatasetManifest:
    """Generate images and manifest for all three splits under out_dir."""
    config.validate()
    counts = (("train", config.n_train), ("val", config.n_val), ("test", config.n_test))
    samples: List[SampleRecord] = []
    train_whs: List[Tuple[float, float]] = []
    index = 0
    for split, count in counts:
        split_dir = os.path.join(out_dir, "images", split)
        os.makedirs(split_dir, exist_ok=True)
        for _ in range(count):
            rng = np.random.default_rng([config.seed, index])
            scene, expression = make_sample(rng, config)
            pixels = render(scene.objects, config.image_size)
            image_path = os.path.join("images", split, f"{index:06d}.png")
            Image.fromarray((pixels * 255.0).round().astype(np.uint8)).save(
                os.path.join(out_dir, image_path)
            )
            gt_box = scene.objects[scene.target_id].box
            samples.append(
                SampleRecord(
                    index=index,
                    split=split,
                    image_path=image_path,
                    expression=expression,
                    target_id=scene.target_id,
                    gt_box=gt_box,
                    hard=scene.hard,
                    objects=scene.objects,
                )
            )
            if split == "train":
                train_whs.append((gt_box.width, gt_box.height))
                if config.n_train < 9:
                    # Tiny corpora: every object informs the anchor statistics.
                    train_whs.extend(
                        (o.box.width, o.box.height)
                        for i, o in enumerate(scene.objects)
                        if i != scene.target_id
                    )
            index += 1
    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        image_size=config.image_size,
        vocabulary=build_vocabulary(),
        anchors=kmeans_anchors(np.array(train_whs)),
        samples=samples,
    )
    write_manifest(manifest, os.path.join(out_dir, "manifest.json"))
    return manifest


def _box_to_json(box: Box) -> List[float]:
    return [box.x_min, box.y_min, box.x_max, box.y_max]


def _record_to_json(record: SampleRecord) -> dict:
    return {
        "index": record.index,
        "split": record.split,
        "image_path": record.image_path,
        "expression": record.expression,
        "target_id": record.target_id,
        "gt_box": _box_to_json(record.gt_box),
        "hard": record.hard,
        "objects": [
            {
                "shape": o.shape,
                "color": o.color,
                "size": o.size,
                "box": _box_to_json(o.box),
                "relations": [[p, j] for p, j in o.relations],
            }
            for o in record.objects
        ],
    }


def write_manifest(manifest: DatasetManifest, path: str) -> None:
    payload = {
        "version": manifest.version,
        "image_size": manifest.image_size,
        "vocabulary": manifest.vocabulary,
        "anchors": manifest.anchors.to_json(),
        "samples": [_record_to_json(r) for r in manifest.samples],
    }
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=1, sort_keys=True)
        handle.write("\n")


def read_manifest(path: str) -> DatasetManifest:
    """Parse and validate a manifest; malformed files and version mismatches
    raise ManifestError rather than returning partial data."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            payload = json.load(handle)
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(
            f"malformed manifest {path}: line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc

    version = payload.get("version")
    if version != MANIFEST_VERSION:
        raise ManifestError(
            f"manifest version {version!r} unsupported, this build reads {MANIFEST_VERSION}"
        )
    try:
        vocabulary = list(payload["vocabulary"])
        known = set(vocabulary)
        samples = []
        for entry in payload["samples"]:
            for token in entry["expression"].split():
                if token not in known:
                    raise ManifestError(
                        f"sample {entry['index']}: token {token!r} outside the vocabulary"
                    )
            samples.append(
                SampleRecord(
                    index=entry["index"],
                    split=entry["split"],
                    image_path=entry["image_path"],
                    expression=entry["expression"],
                    target_id=entry["target_id"],
                    gt_box=Box(*entry["gt_box"]),
                    hard=entry["hard"],
                    objects=[
                        ObjectSpec(
                            shape=o["shape"],
                            color=o["color"],
                            size=o["size"],
                            box=Box(*o["box"]),
                            relations=[(p, j) for p, j in o["relations"]],
                        )
                        for o in entry["objects"]
                    ],
                )
            )
        manifest = DatasetManifest(
            version=version,
            image_size=payload["image_size"],
            vocabulary=vocabulary,
            anchors=AnchorSet.from_json(payload["anchors"]),
            samples=samples,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"manifest {path} is missing or mistypes a field: {exc!r}") from exc
    return manifest


@dataclass
class GroundingArrays:
    """One split loaded into memory, ready to batch."""

    images: np.ndarray       # (n, H, W, 3) uint8
    tokens: np.ndarray       # (n, N) int64, zero-padded
    mask: np.ndarray         # (n, N) bool
    boxes: List[Box]
    indices: np.ndarray      # (n,) global sample indices
    expressions: List[str]

    def __len__(self) -> int:
        return len(self.boxes)


def load_split(manifest: DatasetManifest, root: str, split: str) -> GroundingArrays:
    records = manifest.split_samples(split)
    if not records:
        raise InvalidInputError(f"split {split!r} has no samples")
    token_lists = [tokenize(r.expression, manifest.vocabulary) for r in records]
    max_len = max(len(t) for t in token_lists)
    tokens = np.zeros((len(records), max_len), dtype=np.int64)
    mask = np.zeros((len(records), max_len), dtype=bool)
    for i, ids in enumerate(token_lists):
        tokens[i, : len(ids)] = ids
        mask[i, : len(ids)] = True
    images = np.stack(
        [
            np.asarray(Image.open(os.path.join(root, r.image_path)).convert("RGB"))
            for r in records
        ]
    )
    return GroundingArrays(
        images=images,
        tokens=tokens,
        mask=mask,
        boxes=[r.gt_box for r in records],
        indices=np.array([r.index for r in records], dtype=np.int64),
        expressions=[r.expression for r in records],
    )


def pr_at_threshold(
    predictions: Sequence[Box], ground_truths: Sequence[Box], threshold: float = 0.5
) -> float:
    """Fraction of samples whose predicted box overlaps the gt at IoU >= threshold."""
    if len(predictions) != len(ground_truths):
        raise InvalidInputError(
            f"{len(predictions)} predictions vs {len(ground_truths)} ground truths"
        )
    if not predictions:
        raise InvalidInputError("empty evaluation set")
    hits = sum(1 for p, g in zip(predictions, ground_truths) if iou(p, g) >= threshold)
    return hits / len(predictions)
