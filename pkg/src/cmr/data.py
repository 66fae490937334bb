"""Seeded synthetic multimodal datasets and their JSONL format.

A shared latent world assigns every concept a token id and a visual prototype.
Each region of interest (ROI) is a concept (or background clutter) prototype plus
a horizontal position ``x`` written along a fixed feature axis, plus noise.
ROIs are listed left to right by default (``sort_rois``), the way a detector's
boxes are often ordered; shuffled ROIs are available but much harder to learn.

``nlvr_like``: the text is ``a REL b`` (REL is left-of, or either of
left-of and right-of when ``relation_words=2``; optionally padded with filler
tokens); the label is 1 iff both images contain ``a`` and
``b`` and the relation holds in both. Distractors contain both entities in both
images but break the relation in at least one image, so entity co-occurrence
alone does not determine the label.

``vqa_like``: the text is a question token followed by every concept token in
canonical order; the single image holds two concept ROIs among clutter; the
label is the concept further left (ASK_LEFT) or further right (ASK_RIGHT).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

TASK_KINDS = ("nlvr_like", "vqa_like")
MODEL_TASK = {"nlvr_like": "nlvr", "vqa_like": "vqa"}


class DataError(ValueError):
    """Infeasible generator spec or malformed dataset file."""


class SchemaError(DataError):
    """A record is missing a field or has the wrong shape."""


@dataclass
class SyntheticExample:
    id: str
    task: str
    tokens: list[int]
    visual: list[np.ndarray]  # one (N^v, d_raw_v) float32 array per image
    label: int
    geometry: list[np.ndarray] | None = None  # one (N^v, 4) array per image: x, y, w, h
    trace: dict | None = None

    def __eq__(self, other) -> bool:
        if not isinstance(other, SyntheticExample):
            return NotImplemented
        same_geom = (self.geometry is None) == (other.geometry is None) and (
            self.geometry is None or all(np.array_equal(a, b) for a, b in zip(self.geometry, other.geometry))
        )
        return (
            self.id == other.id
            and self.task == other.task
            and list(self.tokens) == list(other.tokens)
            and self.label == other.label
            and len(self.visual) == len(other.visual)
            and all(np.array_equal(a, b) for a, b in zip(self.visual, other.visual))
            and same_geom
            and self.trace == other.trace
        )


@dataclass(frozen=True)
class GeneratorSpec:
    task: str = "nlvr_like"
    seed: int = 0
    n: int = 2500
    world_seed: int = 0
    vocab_size: int = 16
    n_concepts: int = 8
    n_background: int = 4
    relational: bool = True
    n_text: int = 10
    n_visual: int = 6
    d_raw_v: int = 32
    positive_rate: float = 0.5
    distractor_rate: float = 0.35
    max_fillers: int = 0
    concept_fill: float = 0.5
    attr_scale: float = 3.0
    noise: float = 0.3
    min_gap: float = 0.15
    heldout_fraction: float = 0.2
    sort_rois: bool = True
    relation_words: int = 1

    @property
    def n_images(self) -> int:
        return 2 if self.task == "nlvr_like" else 1

    def validate(self) -> "GeneratorSpec":
        if self.task not in TASK_KINDS:
            raise DataError(f"unknown task {self.task!r}; expected one of {TASK_KINDS}")
        if self.n <= 0:
            raise DataError("n must be positive")
        if self.n_concepts < 2:
            raise DataError("need at least 2 concepts")
        if self.vocab_size < self.n_concepts + 4:
            raise DataError(f"vocab_size {self.vocab_size} < n_concepts + 4 special tokens")
        if self.n_visual < 2:
            raise DataError("need at least 2 ROIs per image")
        if self.task == "nlvr_like":
            if self.n_text < 3:
                raise DataError("nlvr_like text needs n_text >= 3")
            if self.relational and self.positive_rate + self.distractor_rate > 1:
                raise DataError("positive_rate + distractor_rate exceeds 1")
        elif self.n_text < self.n_concepts + 1:
            raise DataError("vqa_like text needs n_text >= n_concepts + 1")
        if self.relation_words not in (1, 2):
            raise DataError("relation_words must be 1 (left-of only) or 2 (left-of and right-of)")
        if not 0 < self.heldout_fraction < 1:
            raise DataError("heldout_fraction must lie in (0, 1)")
        return self


@dataclass
class Vocabulary:
    n_concepts: int
    vocab_size: int

    @property
    def left_of(self) -> int:
        return self.n_concepts

    @property
    def right_of(self) -> int:
        return self.n_concepts + 1

    @property
    def ask_left(self) -> int:
        return self.n_concepts + 2

    @property
    def ask_right(self) -> int:
        return self.n_concepts + 3

    @property
    def fillers(self) -> list[int]:
        return list(range(self.n_concepts + 4, self.vocab_size))


@dataclass
class World:
    """Concept and clutter prototypes plus the position axis (depends only on world_seed)."""

    prototypes: np.ndarray  # (n_concepts + n_background, d_raw_v)
    axis: np.ndarray  # (d_raw_v,)

    @classmethod
    def build(cls, spec: GeneratorSpec) -> "World":
        rng = np.random.default_rng([spec.world_seed, 77])
        protos = rng.standard_normal((spec.n_concepts + spec.n_background, spec.d_raw_v))
        axis = rng.standard_normal(spec.d_raw_v)
        return cls(protos, axis / np.linalg.norm(axis))


@dataclass
class Dataset:
    train: list[SyntheticExample]
    heldout: list[SyntheticExample]
    spec: GeneratorSpec | None = None
    world: World | None = field(default=None, repr=False)


# ---- generation -------------------------------------------------------------
def _render(world: World, spec: GeneratorSpec, rng, concepts: list[int], xs: list[float]):
    """Features and geometry for one image; ``concepts`` index prototypes (clutter >= n_concepts)."""
    n = len(concepts)
    feats = world.prototypes[concepts] + spec.attr_scale * np.outer(xs, world.axis)
    feats = feats + spec.noise * rng.standard_normal(feats.shape)
    geom = np.column_stack([xs, rng.uniform(0, 1, n), rng.uniform(0.05, 0.3, n), rng.uniform(0.05, 0.3, n)])
    return feats.astype(np.float32), geom.astype(np.float32)


def _fill(rng, spec: GeneratorSpec, required: list[int], exclude: set[int]) -> list[int]:
    """ROI concept list containing ``required`` once each, padded with other concepts or clutter."""
    others = [c for c in range(spec.n_concepts) if c not in exclude and c not in required]
    rng.shuffle(others)
    slots = list(required)
    while len(slots) < spec.n_visual:
        if others and rng.random() < spec.concept_fill:
            slots.append(others.pop())
        else:
            slots.append(spec.n_concepts + int(rng.integers(spec.n_background)))
    order = rng.permutation(len(slots))
    return [slots[i] for i in order]


def _positions(rng, concepts: list[int], constraint, spec: GeneratorSpec) -> list[float]:
    """Uniform x per ROI; resample until ``constraint(xs)`` and the min-gap rule hold."""
    for _ in range(1000):
        xs = rng.uniform(0, 1, len(concepts))
        if constraint(xs):
            return [float(x) for x in xs]
    raise DataError("could not place ROIs under the requested constraint")


def _arrange(spec: GeneratorSpec, concepts: list[int], xs: list[float]) -> tuple[list[int], list[float]]:
    """Reorder ROIs left to right when ``spec.sort_rois`` is set."""
    if not spec.sort_rois:
        return concepts, xs
    order = sorted(range(len(xs)), key=lambda i: xs[i])
    return [concepts[i] for i in order], [xs[i] for i in order]


def _relation_holds(rel: str, xa: float, xb: float) -> bool:
    return xa < xb if rel == "left" else xa > xb


def _schedule(rng, n: int, weights: dict[str, float]) -> list[str]:
    """Exact-count kind schedule (largest remainder), shuffled."""
    keys = list(weights)
    raw = np.array([weights[k] for k in keys]) * n
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    kinds = [k for k, c in zip(keys, counts) for _ in range(c)]
    rng.shuffle(kinds)
    return kinds


def _nlvr_example(rng, world: World, spec: GeneratorSpec, vocab: Vocabulary, kind: str, ident: str) -> SyntheticExample:
    a, b = (int(c) for c in rng.choice(spec.n_concepts, 2, replace=False))
    rel = "left" if spec.relation_words == 1 or rng.random() < 0.5 else "right"
    broken = set()
    missing: dict[int, list[int]] = {}
    if kind == "distractor":
        choice = int(rng.integers(3))
        broken = {0, 1} if choice == 2 else {choice}
    elif kind == "missing":
        n_img_missing = int(rng.integers(1, 3))
        for k in rng.choice(2, n_img_missing, replace=False):
            which = int(rng.integers(3))
            missing[int(k)] = [a] if which == 0 else [b] if which == 1 else [a, b]
    images, geoms, trace_imgs = [], [], []
    for k in range(2):
        present = [c for c in (a, b) if c not in missing.get(k, [])]
        concepts = _fill(rng, spec, present, exclude={a, b})
        ia = concepts.index(a) if a in concepts else None
        ib = concepts.index(b) if b in concepts else None
        want = k not in broken

        def ok(xs, ia=ia, ib=ib, want=want):
            if ia is None or ib is None:
                return True
            if abs(xs[ia] - xs[ib]) < spec.min_gap:
                return False
            return _relation_holds(rel, xs[ia], xs[ib]) == want

        concepts, xs = _arrange(spec, concepts, _positions(rng, concepts, ok, spec))
        feats, geom = _render(world, spec, rng, concepts, xs)
        images.append(feats)
        geoms.append(geom)
        trace_imgs.append({"concepts": concepts, "x": xs})
    middle = [a, vocab.left_of if rel == "left" else vocab.right_of, b]
    tokens = _with_fillers(rng, middle, spec, vocab)
    trace = {"a": a, "b": b, "rel": rel, "kind": kind, "images": trace_imgs}
    label = nlvr_label_from_trace(trace, spec.relational)
    return SyntheticExample(ident, "nlvr_like", tokens, images, label, geoms, trace)


def _with_fillers(rng, middle: list[int], spec: GeneratorSpec, vocab: Vocabulary) -> list[int]:
    fillers = vocab.fillers
    room = spec.n_text - len(middle)
    if not fillers or spec.max_fillers <= 0 or room <= 0:
        return list(middle)
    n_pre = int(rng.integers(0, min(spec.max_fillers, room) + 1))
    n_post = int(rng.integers(0, min(spec.max_fillers, room - n_pre) + 1))
    pre = [int(rng.choice(fillers)) for _ in range(n_pre)]
    post = [int(rng.choice(fillers)) for _ in range(n_post)]
    return pre + list(middle) + post


def _vqa_example(rng, world: World, spec: GeneratorSpec, vocab: Vocabulary, answer: int, ident: str) -> SyntheticExample:
    other = int(rng.choice([c for c in range(spec.n_concepts) if c != answer]))
    ask = "left" if rng.random() < 0.5 else "right"
    concepts = [answer, other] + [spec.n_concepts + int(rng.integers(spec.n_background)) for _ in range(spec.n_visual - 2)]
    order = rng.permutation(spec.n_visual)
    concepts = [concepts[i] for i in order]
    ia, io = concepts.index(answer), concepts.index(other)

    def ok(xs):
        if abs(xs[ia] - xs[io]) < spec.min_gap:
            return False
        return (xs[ia] < xs[io]) == (ask == "left")

    concepts, xs = _arrange(spec, concepts, _positions(rng, concepts, ok, spec))
    feats, geom = _render(world, spec, rng, concepts, xs)
    tokens = [vocab.ask_left if ask == "left" else vocab.ask_right] + list(range(spec.n_concepts))
    trace = {"ask": ask, "images": [{"concepts": concepts, "x": xs}]}
    label = vqa_label_from_trace(trace, spec.n_concepts)
    return SyntheticExample(ident, "vqa_like", tokens, [feats], label, [geom], trace)


def _generate_split(rng, world, spec, vocab, n: int, prefix: str) -> list[SyntheticExample]:
    if spec.task == "nlvr_like":
        if spec.relational:
            weights = {"positive": spec.positive_rate, "distractor": spec.distractor_rate,
                       "missing": 1.0 - spec.positive_rate - spec.distractor_rate}
        else:
            weights = {"positive": spec.positive_rate, "missing": 1.0 - spec.positive_rate}
        kinds = _schedule(rng, n, weights)
        return [_nlvr_example(rng, world, spec, vocab, k, f"{prefix}-{i:06d}") for i, k in enumerate(kinds)]
    answers = _schedule(rng, n, {str(c): 1.0 / spec.n_concepts for c in range(spec.n_concepts)})
    return [_vqa_example(rng, world, spec, vocab, int(a), f"{prefix}-{i:06d}") for i, a in enumerate(answers)]


def generate(spec: GeneratorSpec) -> Dataset:
    """Deterministic train/heldout split for ``spec``."""
    spec.validate()
    world = World.build(spec)
    vocab = Vocabulary(spec.n_concepts, spec.vocab_size)
    rng = np.random.default_rng([spec.seed, 0 if spec.task == "nlvr_like" else 1])
    n_held = int(round(spec.n * spec.heldout_fraction))
    n_train = spec.n - n_held
    tag = "nlvr" if spec.task == "nlvr_like" else "vqa"
    train = _generate_split(rng, world, spec, vocab, n_train, f"{tag}-s{spec.seed}-train")
    held = _generate_split(rng, world, spec, vocab, n_held, f"{tag}-s{spec.seed}-heldout")
    return Dataset(train, held, spec, world)


# ---- label oracles -----------------------------------------------------------
def nlvr_label_from_trace(trace: dict, relational: bool = True) -> int:
    a, b, rel = trace["a"], trace["b"], trace["rel"]
    for img in trace["images"]:
        cs, xs = img["concepts"], img["x"]
        if a not in cs or b not in cs:
            return 0
        if relational and not _relation_holds(rel, xs[cs.index(a)], xs[cs.index(b)]):
            return 0
    return 1


def vqa_label_from_trace(trace: dict, n_concepts: int) -> int:
    img = trace["images"][0]
    found = [(x, c) for c, x in zip(img["concepts"], img["x"]) if c < n_concepts]
    found.sort()
    return found[0][1] if trace["ask"] == "left" else found[-1][1]


def brute_force_label(example: SyntheticExample, spec: GeneratorSpec, world: World | None = None) -> int:
    """Recompute the label by exhaustive search over the latent trace.

    Independent of the generator's own label path: every ordered ROI pair in
    every image is examined. When ``world`` is given, each ROI's concept and
    position are first re-derived from its features (nearest prototype after
    projecting out the position axis) and must agree with the trace.
    """
    tr = example.trace
    if tr is None:
        raise DataError(f"{example.id}: no latent trace")
    imgs = tr["images"]
    if world is not None:
        for feats, img in zip(example.visual, imgs):
            f = feats.astype(np.float64)
            x_est = (f - world.prototypes[img["concepts"]]) @ world.axis / spec.attr_scale
            resid = f - spec.attr_scale * np.outer(x_est, world.axis)
            dists = ((resid[:, None, :] - world.prototypes[None]) ** 2).sum(-1)
            decoded = dists.argmin(axis=1)
            if list(decoded) != list(img["concepts"]):
                raise DataError(f"{example.id}: features do not decode to the traced concepts")
    if example.task == "nlvr_like":
        words = [t for t in example.tokens if t < spec.n_concepts or t in (spec.n_concepts, spec.n_concepts + 1)]
        a, rel_tok, b = words[0], words[1], words[2]
        left = rel_tok == spec.n_concepts
        for img in imgs:
            cs, xs = img["concepts"], img["x"]
            hits = [
                (xs[i], xs[j])
                for i in range(len(cs))
                for j in range(len(cs))
                if i != j and cs[i] == a and cs[j] == b
            ]
            if not hits:
                return 0
            if spec.relational and not any((xa < xb) if left else (xa > xb) for xa, xb in hits):
                return 0
        return 1
    img = imgs[0]
    cs, xs = img["concepts"], img["x"]
    ask_left = example.tokens[0] == spec.n_concepts + 2
    best = None
    for i in range(len(cs)):
        if cs[i] >= spec.n_concepts:
            continue
        beats_all = all(
            (xs[i] < xs[j]) if ask_left else (xs[i] > xs[j])
            for j in range(len(cs))
            if j != i and cs[j] < spec.n_concepts
        )
        if beats_all:
            best = cs[i]
    return int(best)


# ---- summaries ----------------------------------------------------------------
def label_balance(examples: list[SyntheticExample]) -> dict[int, int]:
    counts: dict[int, int] = {}
    for ex in examples:
        counts[ex.label] = counts.get(ex.label, 0) + 1
    return dict(sorted(counts.items()))


# ---- JSONL --------------------------------------------------------------------
REQUIRED = ("id", "task", "tokens", "visual", "label")


def _round9(arr: np.ndarray) -> list:
    return [[float(f"{v:.9g}") for v in row] for row in np.asarray(arr, dtype=np.float32).tolist()]


def example_to_record(ex: SyntheticExample) -> dict:
    rec = {
        "id": ex.id,
        "task": ex.task,
        "tokens": [int(t) for t in ex.tokens],
        "visual": [_round9(v) for v in ex.visual],
        "label": int(ex.label),
    }
    if ex.geometry is not None:
        rec["geometry"] = [_round9(g) for g in ex.geometry]
    if ex.trace is not None:
        rec["trace"] = ex.trace
    return rec


def write_jsonl(path, examples: list[SyntheticExample]) -> None:
    with open(Path(path), "w") as fh:
        for ex in examples:
            fh.write(json.dumps(example_to_record(ex), separators=(",", ":")) + "\n")


def record_to_example(rec: dict, n_visual: int | None = None, lineno: int | None = None) -> SyntheticExample:
    where = f"line {lineno}" if lineno is not None else "record"
    if not isinstance(rec, dict):
        raise SchemaError(f"{where}: expected an object")
    for key in REQUIRED:
        if key not in rec:
            raise SchemaError(f"{where} (id={rec.get('id')!r}): missing field {key!r}")
    ident = rec["id"]
    task = rec["task"]
    if task not in TASK_KINDS:
        raise SchemaError(f"{ident}: unknown task {task!r}")
    n_images = 2 if task == "nlvr_like" else 1
    visual = [np.asarray(v, dtype=np.float32) for v in rec["visual"]]
    if len(visual) != n_images:
        raise SchemaError(f"{ident}: expected {n_images} images, found {len(visual)}")
    for v in visual:
        if v.ndim != 2 or (n_visual is not None and v.shape[0] != n_visual):
            raise SchemaError(f"{ident}: visual rows {v.shape[0] if v.ndim == 2 else v.shape} != expected {n_visual}")
    if len({v.shape for v in visual}) > 1:
        raise SchemaError(f"{ident}: images disagree on shape")
    label = int(rec["label"])
    if task == "nlvr_like" and label not in (0, 1):
        raise SchemaError(f"{ident}: nlvr_like label must be 0 or 1")
    geometry = rec.get("geometry")
    if geometry is not None:
        geometry = [np.asarray(g, dtype=np.float32) for g in geometry]
        if any(g.shape != (v.shape[0], 4) for g, v in zip(geometry, visual)):
            raise SchemaError(f"{ident}: geometry must be one 4-tuple per ROI")
    return SyntheticExample(ident, task, [int(t) for t in rec["tokens"]], visual, label, geometry, rec.get("trace"))


def read_jsonl(path, n_visual: int | None = None) -> list[SyntheticExample]:
    """Parse and validate; ``n_visual`` defaults to the first record's ROI count."""
    out = []
    with open(Path(path)) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {lineno}: malformed JSON ({exc.msg})") from exc
            ex = record_to_example(rec, n_visual, lineno)
            if n_visual is None:
                n_visual = ex.visual[0].shape[0]
            out.append(ex)
    return out


def spec_to_dict(spec: GeneratorSpec) -> dict:
    return asdict(spec)
